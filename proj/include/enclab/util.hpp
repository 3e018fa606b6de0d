#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace enclab {

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);
std::uint64_t file_fnv(const std::string& path);
bool file_exists(const std::string& path);
void ensure_dir(const std::string& path);
std::vector<std::string> list_files(const std::string& dir,
                                    const std::string& suffix);

/// Exclusive lock file; refuses a directory another command is writing.
class DirLock {
 public:
  explicit DirLock(const std::string& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

}  // namespace enclab
