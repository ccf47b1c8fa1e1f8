#pragma once

// Minimal blocking TCP helpers for the stream transport.

#include <streambuf>
#include <string>
#include <vector>

namespace csifall {

// "host:port" -> connected socket fd. Throws IoError.
int tcp_connect(const std::string& endpoint);
// Listens on 127.0.0.1:port (0 picks a free port); returns the fd, port via out param.
int tcp_listen(int port, int* bound_port);
int tcp_accept(int listen_fd);
void close_fd(int fd);
void write_all(int fd, const std::string& data);

// Read-only streambuf over a file descriptor, so ReplayReader can parse a socket.
class FdInBuf : public std::streambuf {
public:
    explicit FdInBuf(int fd, std::size_t buffer = 1 << 16) : fd_(fd), buf_(buffer) {}

protected:
    int_type underflow() override;

private:
    int fd_;
    std::vector<char> buf_;
};

}  // namespace csifall
