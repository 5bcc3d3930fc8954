#pragma once
#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <string>

#include "fuselm/error.hpp"

#define EXPECT_FUSELM_ERROR(statement, expected_code)                                    \
  do {                                                                                   \
    try {                                                                                \
      statement;                                                                         \
      ADD_FAILURE() << "expected " << fuselm::to_string(expected_code) << ", no throw";  \
    } catch (const fuselm::Error& e) {                                                   \
      EXPECT_EQ(e.code(), expected_code) << e.what();                                    \
    }                                                                                    \
  } while (0)

namespace fuselm::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("fuselm-test-" + std::to_string(rd()) + std::to_string(rd()));
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

}  // namespace fuselm::testing
