#include "crc/clock.hpp"

#include <ctime>
#include <thread>

namespace crc {

Clock::Steady SystemClock::steady_now() {
  return std::chrono::steady_clock::now().time_since_epoch();
}

std::chrono::system_clock::time_point SystemClock::wall_now() {
  return std::chrono::system_clock::now();
}

void SystemClock::sleep_for(std::chrono::milliseconds d) {
  std::this_thread::sleep_for(d);
}

std::chrono::system_clock::time_point PinnedWallClock::wall_now() {
  return std::chrono::system_clock::time_point(std::chrono::seconds(epoch_));
}

Clock::Steady VirtualClock::steady_now() {
  std::lock_guard lock(mu_);
  return std::chrono::duration_cast<Steady>(elapsed_);
}

std::chrono::system_clock::time_point VirtualClock::wall_now() {
  std::lock_guard lock(mu_);
  return std::chrono::system_clock::time_point(std::chrono::seconds(epoch_)) +
         std::chrono::duration_cast<std::chrono::system_clock::duration>(elapsed_);
}

void VirtualClock::sleep_for(std::chrono::milliseconds d) {
  std::lock_guard lock(mu_);
  if (d.count() > 0) elapsed_ += d;
}

std::chrono::milliseconds VirtualClock::slept() const {
  std::lock_guard lock(mu_);
  return elapsed_;
}

std::string format_utc(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace crc
