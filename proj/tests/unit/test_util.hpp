#pragma once

#include <filesystem>
#include <string>

#include "ctm/rng.hpp"

namespace ctm::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    Rng rng(static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)) ^ ++counter);
    path_ = std::filesystem::temp_directory_path() /
            ("ctm-test-" + std::to_string(rng.next_u64() % 1000000007ULL));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace ctm::testing
