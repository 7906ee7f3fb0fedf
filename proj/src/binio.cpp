#include "gmln/binio.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace gmln::binio {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

void write_all(int fd, std::string_view data, const std::string& path) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      throw StorageError("write to " + path + " failed: " + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

void sync_and_close(int fd, const std::string& path) {
  if (::fsync(fd) != 0) {
    ::close(fd);
    throw StorageError("fsync of " + path + " failed: " + std::strerror(errno));
  }
  ::close(fd);
}

}  // namespace

void write_file_atomic(const std::string& path, std::string_view data) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = target.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw StorageError("cannot write " + tmp + ": " + std::strerror(errno));
  write_all(fd, data, tmp);
  sync_and_close(fd, tmp);
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw StorageError("cannot rename " + tmp + ": " + ec.message());
}

void append_line(const std::string& path, std::string_view line) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw StorageError("cannot append to " + path + ": " + std::strerror(errno));
  std::string buf(line);
  buf.push_back('\n');
  write_all(fd, buf, path);
  sync_and_close(fd, path);
}

}  // namespace gmln::binio
