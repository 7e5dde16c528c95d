/**
 * Copyright 2026 The bertopt Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "bertopt/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <thread>
#include <utility>

namespace bertopt {
namespace {

constexpr int kRightChannel = 0;  // src -> src+1 edge
constexpr int kLeftChannel = 1;   // src -> src-1 edge
constexpr uint64_t kMaxFrame = 1ull << 30;

void put_u32le(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64le(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

}  // namespace

std::vector<uint8_t> encode_frame(uint32_t tag, const void* data, size_t len) {
  std::vector<uint8_t> f;
  f.reserve(kFrameHeaderBytes + len);
  put_u32le(f, tag);
  put_u64le(f, static_cast<uint64_t>(len));
  const uint8_t* p = static_cast<const uint8_t*>(data);
  f.insert(f.end(), p, p + len);
  return f;
}

std::pair<uint32_t, uint64_t> decode_frame_header(const uint8_t* hdr) {
  uint32_t tag = 0;
  for (int i = 3; i >= 0; --i) tag = (tag << 8) | hdr[i];
  uint64_t len = 0;
  for (int i = 11; i >= 4; --i) len = (len << 8) | hdr[i];
  return {tag, len};
}

InProcHub::InProcHub(int world) : world_(world) {
  if (world < 1) throw InvalidConfig("world size must be >= 1");
  boxes_.reserve(static_cast<size_t>(world) * 2);
  for (int i = 0; i < world * 2; ++i) boxes_.push_back(std::make_unique<Box>());
}

InProcHub::Box& InProcHub::box(int src, int channel) {
  return *boxes_[static_cast<size_t>(src * 2 + channel)];
}

InProcTransport::InProcTransport(std::shared_ptr<InProcHub> hub, int rank)
    : hub_(std::move(hub)), rank_(rank) {
  if (rank < 0 || rank >= hub_->world()) {
    throw InvalidConfig("rank out of range for hub");
  }
}

InProcTransport::~InProcTransport() {
  for (int ch : {kRightChannel, kLeftChannel}) {
    InProcHub::Box& b = hub_->box(rank_, ch);
    {
      std::lock_guard<std::mutex> lk(b.m);
      b.closed = true;
    }
    b.cv.notify_all();
  }
}

void InProcTransport::send_impl(int channel, uint32_t tag, const void* data,
                                size_t len) {
  if (hub_->world() == 1) {
    throw ProtocolError("send on a single-rank group");
  }
  if (per_byte_delay_ > 0.0) {
    std::this_thread::sleep_for(
        std::chrono::duration<double>(per_byte_delay_ * static_cast<double>(len)));
  }
  InProcHub::Box& b = hub_->box(rank_, channel);
  {
    std::lock_guard<std::mutex> lk(b.m);
    const uint8_t* p = static_cast<const uint8_t*>(data);
    b.q.push_back(InProcHub::Msg{tag, std::vector<uint8_t>(p, p + len)});
  }
  b.cv.notify_one();
  sent_ += len;
}

std::vector<uint8_t> InProcTransport::recv_impl(int src, int channel,
                                                uint32_t tag) {
  if (hub_->world() == 1) {
    throw ProtocolError("recv on a single-rank group");
  }
  InProcHub::Box& b = hub_->box(src, channel);
  std::unique_lock<std::mutex> lk(b.m);
  const bool ok = b.cv.wait_for(
      lk, std::chrono::duration<double>(watchdog_s_),
      [&] { return !b.q.empty() || b.closed; });
  if (!ok) {
    throw WatchdogTimeout("recv from rank " + std::to_string(src) +
                          " timed out");
  }
  if (b.q.empty()) {
    throw PeerDisconnected("rank " + std::to_string(src) + " closed");
  }
  InProcHub::Msg msg = std::move(b.q.front());
  b.q.pop_front();
  lk.unlock();
  if (msg.tag != tag) {
    throw ProtocolError("expected tag " + std::to_string(tag) + ", got " +
                        std::to_string(msg.tag));
  }
  received_ += msg.payload.size();
  return std::move(msg.payload);
}

void InProcTransport::send_right(uint32_t tag, const void* data, size_t len) {
  send_impl(kRightChannel, tag, data, len);
}

void InProcTransport::send_left(uint32_t tag, const void* data, size_t len) {
  send_impl(kLeftChannel, tag, data, len);
}

std::vector<uint8_t> InProcTransport::recv_left(uint32_t tag) {
  const int src = (rank_ - 1 + hub_->world()) % hub_->world();
  return recv_impl(src, kRightChannel, tag);
}

std::vector<uint8_t> InProcTransport::recv_right(uint32_t tag) {
  const int src = (rank_ + 1) % hub_->world();
  return recv_impl(src, kLeftChannel, tag);
}

namespace {

struct Endpoint {
  std::string host;
  uint16_t port;
};

Endpoint parse_endpoint(const std::string& s) {
  const size_t colon = s.rfind(':');
  if (colon == std::string::npos || colon + 1 >= s.size()) {
    throw InvalidConfig("endpoint must be host:port, got '" + s + "'");
  }
  Endpoint e;
  e.host = s.substr(0, colon);
  const long p = std::stol(s.substr(colon + 1));
  if (p <= 0 || p > 65535) throw InvalidConfig("bad port in '" + s + "'");
  e.port = static_cast<uint16_t>(p);
  return e;
}

void set_nonblocking(int fd) {
  const int flags = fcntl(fd, F_GETFL, 0);
  fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

void set_nodelay(int fd) {
  int one = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

sockaddr_in make_addr(const Endpoint& e) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(e.port);
  if (inet_pton(AF_INET, e.host.c_str(), &addr.sin_addr) != 1) {
    throw InvalidConfig("endpoint host must be an IPv4 address, got '" +
                        e.host + "'");
  }
  return addr;
}

double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

std::vector<std::string> loopback_endpoints(int world) {
  if (world < 1) throw InvalidConfig("world must be >= 1");
  std::vector<std::string> out;
  out.reserve(static_cast<size_t>(world));
  for (int r = 0; r < world; ++r) {
    const int fd = socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw IoFailure("socket() failed");
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    a.sin_port = 0;
    socklen_t len = sizeof(a);
    if (bind(fd, reinterpret_cast<sockaddr*>(&a), sizeof(a)) != 0 ||
        getsockname(fd, reinterpret_cast<sockaddr*>(&a), &len) != 0) {
      close(fd);
      throw IoFailure("could not reserve a loopback port");
    }
    close(fd);
    out.push_back("127.0.0.1:" + std::to_string(ntohs(a.sin_port)));
  }
  return out;
}

TcpTransport::TcpTransport(int rank, const std::vector<std::string>& endpoints,
                           double watchdog_s)
    : rank_(rank), watchdog_s_(watchdog_s) {
  const int world = static_cast<int>(endpoints.size());
  if (rank < 0 || rank >= world) throw InvalidConfig("rank out of range");
  if (world == 1) return;

  const Endpoint self = parse_endpoint(endpoints[static_cast<size_t>(rank)]);
  const Endpoint right =
      parse_endpoint(endpoints[static_cast<size_t>((rank + 1) % world)]);

  const int lfd = socket(AF_INET, SOCK_STREAM, 0);
  if (lfd < 0) throw IoFailure("socket() failed");
  int one = 1;
  setsockopt(lfd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in laddr = make_addr(self);
  if (bind(lfd, reinterpret_cast<sockaddr*>(&laddr), sizeof(laddr)) != 0) {
    close(lfd);
    throw IoFailure("bind failed on " +
                    endpoints[static_cast<size_t>(rank)]);
  }
  if (listen(lfd, 2) != 0) {
    close(lfd);
    throw IoFailure("listen failed");
  }

  const double deadline = now_s() + watchdog_s_;
  int cfd = -1;
  sockaddr_in raddr = make_addr(right);
  while (true) {
    cfd = socket(AF_INET, SOCK_STREAM, 0);
    if (cfd < 0) {
      close(lfd);
      throw IoFailure("socket() failed");
    }
    if (connect(cfd, reinterpret_cast<sockaddr*>(&raddr), sizeof(raddr)) == 0) {
      break;
    }
    close(cfd);
    cfd = -1;
    if (now_s() > deadline) {
      close(lfd);
      throw WatchdogTimeout("connect to right neighbor timed out");
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }

  pollfd pl{lfd, POLLIN, 0};
  const int pr = poll(&pl, 1, static_cast<int>(watchdog_s_ * 1000));
  if (pr <= 0) {
    close(lfd);
    close(cfd);
    throw WatchdogTimeout("accept from left neighbor timed out");
  }
  const int afd = accept(lfd, nullptr, nullptr);
  close(lfd);
  if (afd < 0) {
    close(cfd);
    throw IoFailure("accept failed");
  }

  set_nonblocking(cfd);
  set_nonblocking(afd);
  set_nodelay(cfd);
  set_nodelay(afd);
  right_.fd = cfd;
  left_.fd = afd;
}

TcpTransport::~TcpTransport() {
  if (right_.fd >= 0) close(right_.fd);
  if (left_.fd >= 0) close(left_.fd);
}

void TcpTransport::drain(Sock& s) {
  uint8_t buf[1 << 16];
  while (!s.eof) {
    const ssize_t n = read(s.fd, buf, sizeof(buf));
    if (n > 0) {
      s.rbuf.insert(s.rbuf.end(), buf, buf + n);
      continue;
    }
    if (n == 0) {
      s.eof = true;
      break;
    }
    if (errno == EAGAIN || errno == EWOULDBLOCK) break;
    if (errno == EINTR) continue;
    throw IoFailure("tcp read failed: " + std::string(strerror(errno)));
  }
  while (s.rbuf.size() >= kFrameHeaderBytes) {
    const auto [tag, len] = decode_frame_header(s.rbuf.data());
    if (len > kMaxFrame) throw ProtocolError("oversized frame");
    if (s.rbuf.size() < kFrameHeaderBytes + len) break;
    std::vector<uint8_t> payload(
        s.rbuf.begin() + static_cast<long>(kFrameHeaderBytes),
        s.rbuf.begin() + static_cast<long>(kFrameHeaderBytes + len));
    s.rbuf.erase(s.rbuf.begin(),
                 s.rbuf.begin() + static_cast<long>(kFrameHeaderBytes + len));
    s.inbox.emplace_back(tag, std::move(payload));
  }
}

void TcpTransport::pump_send(Sock& out, const std::vector<uint8_t>& frame) {
  if (out.fd < 0) throw ProtocolError("send on a single-rank group");
  size_t off = 0;
  const double deadline = now_s() + watchdog_s_;
  while (off < frame.size()) {
    pollfd fds[2] = {{out.fd, POLLOUT | POLLIN, 0},
                     {out.fd == right_.fd ? left_.fd : right_.fd, POLLIN, 0}};
    const int pr = poll(fds, 2, 100);
    if (pr < 0 && errno != EINTR) throw IoFailure("poll failed");
    if (now_s() > deadline) throw WatchdogTimeout("tcp send timed out");
    if (fds[0].revents & POLLIN) drain(out);
    if (fds[1].revents & POLLIN) {
      drain(out.fd == right_.fd ? left_ : right_);
    }
    if (fds[0].revents & (POLLERR | POLLHUP)) {
      throw PeerDisconnected("tcp peer dropped during send");
    }
    if (fds[0].revents & POLLOUT) {
      const ssize_t n = write(out.fd, frame.data() + off, frame.size() - off);
      if (n > 0) {
        off += static_cast<size_t>(n);
      } else if (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK &&
                 errno != EINTR) {
        throw PeerDisconnected("tcp write failed: " +
                               std::string(strerror(errno)));
      }
    }
  }
}

std::vector<uint8_t> TcpTransport::pump_recv(Sock& in, uint32_t tag) {
  if (in.fd < 0) throw ProtocolError("recv on a single-rank group");
  const double deadline = now_s() + watchdog_s_;
  while (in.inbox.empty()) {
    if (in.eof) throw PeerDisconnected("tcp peer closed");
    pollfd pl{in.fd, POLLIN, 0};
    const int pr = poll(&pl, 1, 100);
    if (pr < 0 && errno != EINTR) throw IoFailure("poll failed");
    if (pl.revents & (POLLIN | POLLERR | POLLHUP)) drain(in);
    if (in.inbox.empty() && in.eof) {
      throw PeerDisconnected("tcp peer closed");
    }
    if (in.inbox.empty() && (pl.revents & POLLERR)) {
      throw PeerDisconnected("tcp peer dropped");
    }
    if (in.inbox.empty() && now_s() > deadline) {
      throw WatchdogTimeout("tcp recv timed out");
    }
  }
  auto [got, payload] = std::move(in.inbox.front());
  in.inbox.pop_front();
  if (got != tag) {
    throw ProtocolError("expected tag " + std::to_string(tag) + ", got " +
                        std::to_string(got));
  }
  received_ += payload.size();
  return std::move(payload);
}

void TcpTransport::send_right(uint32_t tag, const void* data, size_t len) {
  pump_send(right_, encode_frame(tag, data, len));
  sent_ += len;
}

void TcpTransport::send_left(uint32_t tag, const void* data, size_t len) {
  pump_send(left_, encode_frame(tag, data, len));
  sent_ += len;
}

std::vector<uint8_t> TcpTransport::recv_left(uint32_t tag) {
  return pump_recv(left_, tag);
}

std::vector<uint8_t> TcpTransport::recv_right(uint32_t tag) {
  return pump_recv(right_, tag);
}

}  // namespace bertopt
