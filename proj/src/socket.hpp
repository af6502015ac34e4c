#pragma once

// Minimal blocking TCP sockets with poll-based deadlines.

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "fedtl/errors.hpp"

namespace fedtl::net {

class TimeoutError : public TransportError {
 public:
  using TransportError::TransportError;
};

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket();
  Socket(Socket&& other) noexcept;
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  static Socket connect(const std::string& host, std::uint16_t port,
                        std::chrono::milliseconds timeout);

  bool valid() const noexcept { return fd_ >= 0; }
  int fd() const noexcept { return fd_; }

  void send_all(std::span<const std::uint8_t> data);
  /// Fills `out` completely. Throws TimeoutError if the deadline passes and
  /// TransportError if the peer closes.
  void recv_exact(std::span<std::uint8_t> out,
                  std::optional<std::chrono::milliseconds> timeout);
  /// Waits until data is readable; false on timeout.
  bool wait_readable(std::chrono::milliseconds timeout);
  void shutdown() noexcept;
  void close() noexcept;
  int release() noexcept {
    const int fd = fd_;
    fd_ = -1;
    return fd;
  }

 private:
  int fd_ = -1;
};

/// Listening socket bound to host:port (port 0 = ephemeral).
int listen_on(const std::string& host, std::uint16_t port,
              std::uint16_t& bound_port);

/// Accepts one connection, or returns an invalid socket on timeout.
Socket accept_from(int listen_fd, std::chrono::milliseconds timeout);

}  // namespace fedtl::net
