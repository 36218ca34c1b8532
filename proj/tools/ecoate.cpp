#include <unistd.h>

#include <filesystem>
#include <iostream>

#include "ecoate/cli.hpp"

static std::string self_path(const char* argv0) {
  std::error_code ec;
  auto p = std::filesystem::read_symlink("/proc/self/exe", ec);
  if (!ec) return p.string();
  return std::filesystem::absolute(argv0).string();
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ecoate::cli::run(args, std::cout, std::cerr, self_path(argv[0]));
}
