#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace testing_support {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("vffgp_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

// restores VFFGP_THREADS on scope exit so tests can vary the worker count
struct ThreadsEnvGuard {
  std::string saved;
  bool had = false;
  ThreadsEnvGuard() {
    if (const char* v = std::getenv("VFFGP_THREADS")) {
      saved = v;
      had = true;
    }
  }
  ~ThreadsEnvGuard() {
    if (had)
      ::setenv("VFFGP_THREADS", saved.c_str(), 1);
    else
      ::unsetenv("VFFGP_THREADS");
  }
};

}  // namespace testing_support
