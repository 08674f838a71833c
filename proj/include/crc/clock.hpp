#pragma once

#include <chrono>
#include <cstdint>
#include <mutex>
#include <string>

namespace crc {

// Time source for backoff, rate limiting and record timestamps. Tests swap
// in VirtualClock so nothing actually sleeps.
class Clock {
 public:
  using Steady = std::chrono::steady_clock::duration;

  virtual ~Clock() = default;
  virtual Steady steady_now() = 0;
  virtual std::chrono::system_clock::time_point wall_now() = 0;
  virtual void sleep_for(std::chrono::milliseconds d) = 0;
};

class SystemClock : public Clock {
 public:
  Steady steady_now() override;
  std::chrono::system_clock::time_point wall_now() override;
  void sleep_for(std::chrono::milliseconds d) override;
};

// Real timing, but every wall timestamp reads as a fixed instant. Used for
// reproducible runs (SOURCE_DATE_EPOCH).
class PinnedWallClock : public SystemClock {
 public:
  explicit PinnedWallClock(std::int64_t epoch_seconds) : epoch_(epoch_seconds) {}
  std::chrono::system_clock::time_point wall_now() override;

 private:
  std::int64_t epoch_;
};

class VirtualClock : public Clock {
 public:
  explicit VirtualClock(std::int64_t epoch_seconds = 0) : epoch_(epoch_seconds) {}

  Steady steady_now() override;
  std::chrono::system_clock::time_point wall_now() override;
  void sleep_for(std::chrono::milliseconds d) override;
  void advance(std::chrono::milliseconds d) { sleep_for(d); }
  std::chrono::milliseconds slept() const;

 private:
  mutable std::mutex mu_;
  std::int64_t epoch_;
  std::chrono::milliseconds elapsed_{0};
};

// ISO 8601 UTC, second precision: 2024-05-13T00:00:00Z.
std::string format_utc(std::chrono::system_clock::time_point t);

}  // namespace crc
