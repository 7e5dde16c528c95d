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
#ifndef BERTOPT_TRANSPORT_HPP_
#define BERTOPT_TRANSPORT_HPP_

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "bertopt/errors.hpp"

namespace bertopt {

// Point-to-point messaging between ring neighbors. Wire framing is little
// endian: u32 tag, u64 payload length, payload bytes. recv validates the
// frame tag against the expected one; a mismatch means the two sides have
// diverged on the message sequence. Byte counters cover payload only, so
// tests can compare them against analytic exchange volumes.
class Transport {
 public:
  virtual ~Transport() = default;

  virtual void send_right(uint32_t tag, const void* data, size_t len) = 0;
  virtual void send_left(uint32_t tag, const void* data, size_t len) = 0;
  virtual std::vector<uint8_t> recv_left(uint32_t tag) = 0;
  virtual std::vector<uint8_t> recv_right(uint32_t tag) = 0;

  uint64_t payload_bytes_sent() const { return sent_.load(); }
  uint64_t payload_bytes_received() const { return received_.load(); }

 protected:
  std::atomic<uint64_t> sent_{0};
  std::atomic<uint64_t> received_{0};
};

// Frame helpers shared by the TCP binding and its tests.
std::vector<uint8_t> encode_frame(uint32_t tag, const void* data, size_t len);
// Parses the 12-byte header; returns {tag, payload length}.
std::pair<uint32_t, uint64_t> decode_frame_header(const uint8_t* hdr);
constexpr size_t kFrameHeaderBytes = 12;

// Mailboxes shared by one in-process worker group: two FIFO channels per
// rank (rightward and leftward edges of the ring).
class InProcHub {
 public:
  explicit InProcHub(int world);

  int world() const { return world_; }

 private:
  friend class InProcTransport;
  struct Msg {
    uint32_t tag;
    std::vector<uint8_t> payload;
  };
  struct Box {
    std::mutex m;
    std::condition_variable cv;
    std::deque<Msg> q;
    bool closed = false;
  };
  Box& box(int src, int channel);

  int world_;
  std::vector<std::unique_ptr<Box>> boxes_;
};

// In-process binding: one transport per rank over a shared hub. Destruction
// closes the rank's outgoing channels, so blocked peers observe
// PeerDisconnected instead of hanging. set_per_byte_delay injects simulated
// wire time, charged to the sender before delivery.
class InProcTransport : public Transport {
 public:
  InProcTransport(std::shared_ptr<InProcHub> hub, int rank);
  ~InProcTransport() override;

  void send_right(uint32_t tag, const void* data, size_t len) override;
  void send_left(uint32_t tag, const void* data, size_t len) override;
  std::vector<uint8_t> recv_left(uint32_t tag) override;
  std::vector<uint8_t> recv_right(uint32_t tag) override;

  void set_per_byte_delay(double seconds) { per_byte_delay_ = seconds; }
  void set_watchdog(double seconds) { watchdog_s_ = seconds; }

 private:
  void send_impl(int channel, uint32_t tag, const void* data, size_t len);
  std::vector<uint8_t> recv_impl(int src, int channel, uint32_t tag);

  std::shared_ptr<InProcHub> hub_;
  int rank_;
  double per_byte_delay_ = 0.0;
  double watchdog_s_ = 30.0;
};

// Reserves `world` currently free loopback ports and returns them as
// rank-ordered "127.0.0.1:port" endpoints for TcpTransport.
std::vector<std::string> loopback_endpoints(int world);

// TCP stream binding. endpoints[i] is "host:port" for rank i's listener.
// Each rank binds its own endpoint, connects to its right neighbor
// (retrying while that listener comes up), and accepts its left neighbor.
// Sockets run non-blocking; a blocked send keeps draining inbound frames,
// which prevents the all-ranks-sending rendezvous deadlock.
class TcpTransport : public Transport {
 public:
  TcpTransport(int rank, const std::vector<std::string>& endpoints,
               double watchdog_s = 30.0);
  ~TcpTransport() override;

  void send_right(uint32_t tag, const void* data, size_t len) override;
  void send_left(uint32_t tag, const void* data, size_t len) override;
  std::vector<uint8_t> recv_left(uint32_t tag) override;
  std::vector<uint8_t> recv_right(uint32_t tag) override;

 private:
  struct Sock {
    int fd = -1;
    std::vector<uint8_t> rbuf;
    std::deque<std::pair<uint32_t, std::vector<uint8_t>>> inbox;
    // A peer that finished its protocol closes eagerly; frames it already
    // delivered stay readable, so EOF only fails a recv with no frame left.
    bool eof = false;
  };
  void pump_send(Sock& out, const std::vector<uint8_t>& frame);
  std::vector<uint8_t> pump_recv(Sock& in, uint32_t tag);
  void drain(Sock& s);

  int rank_;
  double watchdog_s_;
  Sock right_;  // connected to (rank+1) % world
  Sock left_;   // accepted from (rank-1+world) % world
};

}  // namespace bertopt

#endif  // BERTOPT_TRANSPORT_HPP_
