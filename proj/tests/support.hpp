#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <doctest.h>

#include "neurofuse/error.hpp"

namespace test_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("neurofuse-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename F>
neurofuse::ErrorCode error_code_of(F&& f) {
  try {
    f();
  } catch (const neurofuse::Error& e) {
    return e.code();
  }
  FAIL("expected a neurofuse::Error");
  return neurofuse::ErrorCode::InvalidArgument;
}

}  // namespace test_support

#define CHECK_ERROR(expr, code) CHECK(test_support::error_code_of([&] { (void)(expr); }) == (code))
