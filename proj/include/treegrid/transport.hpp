#pragma once

// Wide-area channel: one logical message pipe striped over N parallel byte
// streams, with per-stream packet pacing and framed chunk reassembly. The
// same Channel runs over TCP sockets or over an in-process network emulator
// that models latency, bandwidth, jitter and the TCP window.

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "treegrid/wire.hpp"

namespace treegrid::transport {

using Clock = std::chrono::steady_clock;
using wire::Bytes;

// ---------------------------------------------------------------------------
// Configuration

struct ChannelConfig {
  std::uint32_t n_streams = 64;
  std::uint32_t buffer_bytes = 786432;            // 768 kB per stream
  std::uint64_t pace_bytes_per_s = 10'000'000;    // per stream; 0 = unpaced
  std::uint64_t aggregate_pace_bytes_per_s = 0;   // whole channel; 0 = off
  std::uint32_t connect_timeout_ms = 5000;
  std::uint32_t chunk_bytes = 64 * 1024;

  void validate() const {
    if (n_streams < 1) throw std::invalid_argument("n_streams must be >= 1");
    if (chunk_bytes < 1024) throw std::invalid_argument("chunk_bytes must be >= 1 KiB");
    if (buffer_bytes < 1) throw std::invalid_argument("buffer_bytes must be >= 1");
  }
};

struct EmuNetConfig {
  double one_way_latency_ms = 0.0;
  double bandwidth_bytes_per_s = 1.25e9;  // 10 Gbit/s
  double jitter_ms = 0.0;                 // uniform [0, jitter]
  std::uint64_t seed = 1;

  void validate() const {
    if (!(one_way_latency_ms >= 0.0)) throw std::invalid_argument("latency must be >= 0");
    if (!(bandwidth_bytes_per_s > 0.0)) throw std::invalid_argument("bandwidth must be > 0");
    if (!(jitter_ms >= 0.0)) throw std::invalid_argument("jitter must be >= 0");
  }
};

inline constexpr std::uint16_t kDefaultPortBase = 4256;

inline std::uint16_t port_base_from_env() {
  if (const char* v = std::getenv("TREEGRID_PORT_BASE")) {
    const long p = std::strtol(v, nullptr, 10);
    if (p > 0 && p < 65536) return static_cast<std::uint16_t>(p);
  }
  return kDefaultPortBase;
}

// ---------------------------------------------------------------------------
// Errors

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class TimeoutError : public TransportError {
 public:
  using TransportError::TransportError;
};
class PartialConnectError : public TransportError {
 public:
  PartialConnectError(std::uint32_t connected, std::uint32_t requested)
      : TransportError("partial connection: " + std::to_string(connected) + " of " +
                       std::to_string(requested) + " streams connected; rolled back"),
        connected_(connected),
        requested_(requested) {}
  [[nodiscard]] std::uint32_t connected() const { return connected_; }
  [[nodiscard]] std::uint32_t requested() const { return requested_; }

 private:
  std::uint32_t connected_;
  std::uint32_t requested_;
};
class IntegrityError : public TransportError {
 public:
  IntegrityError(std::uint32_t stream, std::uint64_t msg_id, std::uint32_t chunk, const std::string& what)
      : TransportError(what + " on stream " + std::to_string(stream) + ", message " +
                       std::to_string(msg_id) + ", chunk " + std::to_string(chunk)),
        stream_(stream),
        chunk_(chunk) {}
  [[nodiscard]] std::uint32_t stream() const { return stream_; }
  [[nodiscard]] std::uint32_t chunk() const { return chunk_; }

 private:
  std::uint32_t stream_;
  std::uint32_t chunk_;
};
class TruncationError : public TransportError {
 public:
  using TransportError::TransportError;
};
class ChannelClosed : public TransportError {
 public:
  using TransportError::TransportError;
};

// ---------------------------------------------------------------------------
// Frames

inline constexpr std::size_t kFrameHeaderBytes = 4 + 8 + 4 + 4 + 4 + 4;

struct FrameHeader {
  std::uint64_t msg_id = 0;
  std::uint32_t chunk_seq = 0;
  std::uint32_t n_chunks = 0;
  std::uint32_t payload_len = 0;
  std::uint32_t crc = 0;
};

inline std::uint32_t crc32_of(std::span<const std::byte> data) {
  uLong c = crc32(0L, Z_NULL, 0);
  const auto* p = reinterpret_cast<const Bytef*>(data.data());
  std::size_t left = data.size();
  while (left > 0) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    c = crc32(c, p, n);
    p += n;
    left -= n;
  }
  return static_cast<std::uint32_t>(c);
}

inline Bytes encode_frame(std::uint64_t msg_id, std::uint32_t chunk_seq, std::uint32_t n_chunks,
                          std::span<const std::byte> payload) {
  wire::Writer w(kFrameHeaderBytes + payload.size());
  w.put_tag("TGW1").put(msg_id).put(chunk_seq).put(n_chunks);
  w.put(static_cast<std::uint32_t>(payload.size())).put(crc32_of(payload));
  w.put_bytes(payload);
  return std::move(w).take();
}

/// Parses the fixed-size header; throws DecodeError on a bad magic.
inline FrameHeader decode_frame_header(std::span<const std::byte> bytes) {
  wire::Reader r(bytes);
  if (!r.match_tag("TGW1")) throw wire::DecodeError("bad frame magic");
  FrameHeader h;
  h.msg_id = r.get<std::uint64_t>();
  h.chunk_seq = r.get<std::uint32_t>();
  h.n_chunks = r.get<std::uint32_t>();
  h.payload_len = r.get<std::uint32_t>();
  h.crc = r.get<std::uint32_t>();
  return h;
}

// ---------------------------------------------------------------------------
// Byte streams

/// Reliable, ordered, full-duplex byte stream.
class ByteStream {
 public:
  virtual ~ByteStream() = default;
  virtual void write_all(Bytes bytes) = 0;
  /// Fills `out` completely. Returns false on a clean end of stream before the
  /// first byte; throws TruncationError if the stream ends part-way.
  virtual bool read_exact(std::span<std::byte> out) = 0;
  /// Ends this side's writes; the peer sees end of stream.
  virtual void close_write() = 0;
  /// Tears the stream down in both directions, unblocking readers.
  virtual void abort() = 0;
};

// --- emulator ---------------------------------------------------------------

namespace detail {

/// One direction of a path: shared bandwidth, latency and jitter.
class EmuLink {
 public:
  explicit EmuLink(const EmuNetConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {}

  /// Schedules `bytes` onto the link; returns the arrival time at the far end.
  Clock::time_point schedule(std::size_t bytes, Clock::time_point now) {
    std::lock_guard lock(mu_);
    const auto tx = std::chrono::duration<double>(static_cast<double>(bytes) / cfg_.bandwidth_bytes_per_s);
    const auto start = std::max(now, free_at_);
    free_at_ = start + std::chrono::duration_cast<Clock::duration>(tx);
    double delay_ms = cfg_.one_way_latency_ms;
    if (cfg_.jitter_ms > 0.0) delay_ms += std::uniform_real_distribution<double>(0.0, cfg_.jitter_ms)(rng_);
    return free_at_ + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double, std::milli>(delay_ms));
  }

  [[nodiscard]] Clock::duration latency() const {
    return std::chrono::duration_cast<Clock::duration>(
        std::chrono::duration<double, std::milli>(cfg_.one_way_latency_ms));
  }

  /// Test hook: flip one payload byte in the `skip`-th next write.
  void corrupt_after(std::int64_t skip) { corrupt_countdown_.store(skip); }

  bool take_corruption() {
    auto v = corrupt_countdown_.load();
    while (v >= 0) {
      if (corrupt_countdown_.compare_exchange_weak(v, v - 1)) return v == 0;
    }
    return false;
  }

 private:
  EmuNetConfig cfg_;
  std::mutex mu_;
  std::mt19937_64 rng_;
  Clock::time_point free_at_{};
  std::atomic<std::int64_t> corrupt_countdown_{-1};
};

/// One direction of one stream.
class EmuPipe {
 public:
  EmuPipe(std::shared_ptr<EmuLink> link, std::size_t window) : link_(std::move(link)), window_(window) {}

  void write(Bytes bytes) {
    std::unique_lock lock(mu_);
    if (closed_) throw ChannelClosed("write on closed stream");
    // Window: bytes stay "in flight" until their ack returns one latency
    // after arrival.
    for (;;) {
      const auto now = Clock::now();
      while (!acks_.empty() && acks_.front().first <= now) {
        inflight_ -= acks_.front().second;
        acks_.pop_front();
      }
      if (inflight_ == 0 || inflight_ + bytes.size() <= window_) break;
      cv_.wait_until(lock, acks_.front().first);
      if (closed_) throw ChannelClosed("write on closed stream");
    }
    if (link_->take_corruption() && bytes.size() > kFrameHeaderBytes)
      bytes[kFrameHeaderBytes] ^= std::byte{0x5a};
    const auto now = Clock::now();
    auto arrive = link_->schedule(bytes.size(), now);
    arrive = std::max(arrive, last_arrival_);  // in-order stream
    last_arrival_ = arrive;
    inflight_ += bytes.size();
    acks_.emplace_back(arrive + link_->latency(), bytes.size());
    segments_.push_back({arrive, std::move(bytes), 0});
    cv_.notify_all();
  }

  bool read_exact(std::span<std::byte> out) {
    std::unique_lock lock(mu_);
    std::size_t got = 0;
    while (got < out.size()) {
      if (aborted_) break;
      if (segments_.empty()) {
        if (closed_) break;
        cv_.wait(lock);
        continue;
      }
      auto& seg = segments_.front();
      const auto now = Clock::now();
      if (seg.arrive > now) {
        cv_.wait_until(lock, seg.arrive);
        continue;
      }
      const std::size_t n = std::min(out.size() - got, seg.data.size() - seg.offset);
      std::memcpy(out.data() + got, seg.data.data() + seg.offset, n);
      got += n;
      seg.offset += n;
      if (seg.offset == seg.data.size()) segments_.pop_front();
    }
    if (got == out.size()) return true;
    if (got == 0) return false;
    throw TruncationError("stream ended mid-frame");
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_.notify_all();
  }

  void abort() {
    std::lock_guard lock(mu_);
    closed_ = true;
    aborted_ = true;
    cv_.notify_all();
  }

 private:
  struct Segment {
    Clock::time_point arrive;
    Bytes data;
    std::size_t offset;
  };
  std::shared_ptr<EmuLink> link_;
  std::size_t window_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Segment> segments_;
  std::deque<std::pair<Clock::time_point, std::size_t>> acks_;
  std::size_t inflight_ = 0;
  Clock::time_point last_arrival_{};
  bool closed_ = false;
  bool aborted_ = false;
};

class EmuStream final : public ByteStream {
 public:
  EmuStream(std::shared_ptr<EmuPipe> out, std::shared_ptr<EmuPipe> in) : out_(std::move(out)), in_(std::move(in)) {}
  ~EmuStream() override { abort(); }

  void write_all(Bytes bytes) override { out_->write(std::move(bytes)); }
  bool read_exact(std::span<std::byte> out) override { return in_->read_exact(out); }
  void close_write() override { out_->close(); }
  void abort() override {
    out_->abort();
    in_->abort();
  }

 private:
  std::shared_ptr<EmuPipe> out_;
  std::shared_ptr<EmuPipe> in_;
};

}  // namespace detail

/// A pair of emulated streams sharing one path (two links, one per direction).
struct EmuPath {
  std::shared_ptr<detail::EmuLink> forward;
  std::shared_ptr<detail::EmuLink> backward;

  explicit EmuPath(const EmuNetConfig& cfg)
      : forward(std::make_shared<detail::EmuLink>(cfg)),
        backward(std::make_shared<detail::EmuLink>(EmuNetConfig{cfg.one_way_latency_ms,
                                                                cfg.bandwidth_bytes_per_s, cfg.jitter_ms,
                                                                cfg.seed ^ 0x9e3779b97f4a7c15ULL})) {
    cfg.validate();
  }

  std::pair<std::unique_ptr<ByteStream>, std::unique_ptr<ByteStream>> make_stream(std::size_t window) {
    auto ab = std::make_shared<detail::EmuPipe>(forward, window);
    auto ba = std::make_shared<detail::EmuPipe>(backward, window);
    return {std::make_unique<detail::EmuStream>(ab, ba), std::make_unique<detail::EmuStream>(ba, ab)};
  }
};

// --- TCP --------------------------------------------------------------------

namespace detail {

class TcpStream final : public ByteStream {
 public:
  explicit TcpStream(int fd) : fd_(fd) {}
  ~TcpStream() override {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpStream(const TcpStream&) = delete;
  TcpStream& operator=(const TcpStream&) = delete;

  void write_all(Bytes bytes) override {
    std::size_t off = 0;
    while (off < bytes.size()) {
      const ssize_t n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ChannelClosed(std::string("send failed: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  bool read_exact(std::span<std::byte> out) override {
    std::size_t got = 0;
    while (got < out.size()) {
      const ssize_t n = ::recv(fd_, out.data() + got, out.size() - got, 0);
      if (n < 0) {
        if (errno == EINTR) continue;
        break;
      }
      if (n == 0) break;
      got += static_cast<std::size_t>(n);
    }
    if (got == out.size()) return true;
    if (got == 0) return false;
    throw TruncationError("stream ended mid-frame");
  }

  void close_write() override { ::shutdown(fd_, SHUT_WR); }
  void abort() override { ::shutdown(fd_, SHUT_RDWR); }

 private:
  int fd_;
};

inline void set_buffers(int fd, std::uint32_t bytes) {
  int b = static_cast<int>(bytes);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDBUF, &b, sizeof b);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &b, sizeof b);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

// Connects, retrying refused connections until the deadline (the peer may
// not be listening yet). Returns -1 on timeout.
inline int connect_with_deadline(const sockaddr_in& addr, std::uint32_t buffer, Clock::time_point deadline) {
  while (Clock::now() < deadline) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError(std::string("socket: ") + std::strerror(errno));
    set_buffers(fd, buffer);
    const int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr);
    if (rc < 0 && errno == EINPROGRESS) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
      pollfd p{fd, POLLOUT, 0};
      rc = ::poll(&p, 1, static_cast<int>(std::max<long long>(left, 0)));
      if (rc == 1) {
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
      } else {
        rc = -1;
      }
    }
    if (rc == 0) {
      ::fcntl(fd, F_SETFL, flags);
      return fd;
    }
    ::close(fd);
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return -1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pacing

/// Token bucket with 10 ms of burst capacity.
class TokenBucket {
 public:
  explicit TokenBucket(std::uint64_t rate) : rate_(static_cast<double>(rate)) {
    capacity_ = std::max(1.0, rate_ * kGranularity);
    tokens_ = capacity_;
    last_ = Clock::now();
  }

  static constexpr double kGranularity = 0.010;

  void acquire(std::size_t bytes) {
    if (rate_ <= 0.0) return;
    const double need = std::min(static_cast<double>(bytes), capacity_);
    for (;;) {
      double wait_s = 0.0;
      {
        std::lock_guard lock(mu_);
        refill();
        if (tokens_ >= need) {
          tokens_ -= static_cast<double>(bytes);
          return;
        }
        wait_s = (need - tokens_) / rate_;
      }
      std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
    }
  }

 private:
  void refill() {
    const auto now = Clock::now();
    tokens_ = std::min(capacity_, tokens_ + rate_ * std::chrono::duration<double>(now - last_).count());
    last_ = now;
  }

  double rate_;
  double capacity_ = 0.0;
  double tokens_ = 0.0;
  Clock::time_point last_;
  std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Channel

struct SendReport {
  std::uint64_t bytes = 0;
  double elapsed_s = 0.0;
  double throughput_bytes_per_s = 0.0;
};

class Channel {
 public:
  Channel(std::vector<std::unique_ptr<ByteStream>> streams, const ChannelConfig& cfg)
      : cfg_(cfg), state_(std::make_shared<State>()) {
    cfg_.validate();
    if (streams.size() != cfg_.n_streams) throw std::invalid_argument("stream count does not match config");
    if (cfg_.aggregate_pace_bytes_per_s > 0)
      aggregate_ = std::make_shared<TokenBucket>(cfg_.aggregate_pace_bytes_per_s);
    state_->open_readers = static_cast<std::uint32_t>(streams.size());
    for (std::uint32_t i = 0; i < streams.size(); ++i) {
      auto lane = std::make_unique<Lane>();
      lane->index = i;
      lane->stream = std::move(streams[i]);
      lane->pacer = std::make_unique<TokenBucket>(cfg_.pace_bytes_per_s);
      lanes_.push_back(std::move(lane));
    }
    for (auto& lane : lanes_) {
      Lane* l = lane.get();
      l->writer = std::thread([this, l] { writer_loop(*l); });
      l->reader = std::thread([this, l] { reader_loop(*l); });
    }
  }

  Channel(const Channel&) = delete;
  Channel& operator=(const Channel&) = delete;

  ~Channel() { close(); }

  [[nodiscard]] std::uint32_t stream_count() const { return static_cast<std::uint32_t>(lanes_.size()); }
  [[nodiscard]] const ChannelConfig& config() const { return cfg_; }

  /// Splits, stripes and paces one message; returns once every chunk has
  /// been handed to its stream.
  SendReport send_message(std::span<const std::byte> message) {
    const auto t0 = Clock::now();
    const std::size_t chunk = cfg_.chunk_bytes;
    const auto n_chunks = static_cast<std::uint32_t>(std::max<std::size_t>(1, (message.size() + chunk - 1) / chunk));
    const std::uint64_t id = next_send_id_++;
    auto pending = std::make_shared<Pending>();
    pending->left = n_chunks;
    for (std::uint32_t c = 0; c < n_chunks; ++c) {
      const std::size_t off = static_cast<std::size_t>(c) * chunk;
      const std::size_t len = std::min(chunk, message.size() - std::min(off, message.size()));
      Lane& lane = *lanes_[rr_++ % lanes_.size()];
      Outgoing out{encode_frame(id, c, n_chunks, message.subspan(std::min(off, message.size()), len)), pending};
      {
        std::lock_guard lock(lane.mu);
        lane.queue.push_back(std::move(out));
      }
      lane.cv.notify_one();
    }
    std::unique_lock lock(pending->mu);
    pending->cv.wait(lock, [&] { return pending->left == 0; });
    if (pending->error) std::rethrow_exception(pending->error);
    SendReport r;
    r.bytes = message.size();
    r.elapsed_s = std::chrono::duration<double>(Clock::now() - t0).count();
    r.throughput_bytes_per_s = r.elapsed_s > 0.0 ? static_cast<double>(r.bytes) / r.elapsed_s : 0.0;
    return r;
  }

  /// Next whole message in send order. Throws IntegrityError, TruncationError
  /// or ChannelClosed.
  Bytes recv_message() {
    std::unique_lock lock(state_->mu);
    for (;;) {
      if (state_->error) std::rethrow_exception(state_->error);
      auto it = state_->partial.find(next_recv_id_);
      if (it != state_->partial.end() && it->second.received == it->second.chunks.size()) {
        Bytes out;
        std::size_t total = 0;
        for (const auto& c : it->second.chunks) total += c.size();
        out.reserve(total);
        for (auto& c : it->second.chunks) out.insert(out.end(), c.begin(), c.end());
        state_->partial.erase(it);
        ++next_recv_id_;
        return out;
      }
      if (state_->open_readers == 0) {
        if (!state_->partial.empty())
          throw TruncationError("peer closed mid-message " + std::to_string(next_recv_id_));
        throw ChannelClosed("channel closed by peer");
      }
      state_->cv.wait(lock);
    }
  }

  /// Flushes queued chunks, ends writes and tears down all streams.
  void close() {
    if (closed_.exchange(true)) return;
    for (auto& lane : lanes_) {
      {
        std::lock_guard lock(lane->mu);
        lane->stopping = true;
      }
      lane->cv.notify_all();
    }
    for (auto& lane : lanes_)
      if (lane->writer.joinable()) lane->writer.join();
    for (auto& lane : lanes_) lane->stream->close_write();
    // Give the peer's close a moment to arrive before forcing readers out.
    for (auto& lane : lanes_) lane->stream->abort();
    for (auto& lane : lanes_)
      if (lane->reader.joinable()) lane->reader.join();
  }

 private:
  struct Pending {
    std::mutex mu;
    std::condition_variable cv;
    std::uint32_t left = 0;
    std::exception_ptr error;
  };
  struct Outgoing {
    Bytes frame;
    std::shared_ptr<Pending> pending;
  };
  struct Lane {
    std::uint32_t index = 0;
    std::unique_ptr<ByteStream> stream;
    std::unique_ptr<TokenBucket> pacer;
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Outgoing> queue;
    bool stopping = false;
    std::thread writer;
    std::thread reader;
  };
  struct Assembly {
    std::vector<Bytes> chunks;
    std::vector<bool> have;
    std::size_t received = 0;
  };
  struct State {
    std::mutex mu;
    std::condition_variable cv;
    std::map<std::uint64_t, Assembly> partial;
    std::uint32_t open_readers = 0;
    std::exception_ptr error;
  };

  void writer_loop(Lane& lane) {
    for (;;) {
      Outgoing out;
      {
        std::unique_lock lock(lane.mu);
        lane.cv.wait(lock, [&] { return lane.stopping || !lane.queue.empty(); });
        if (lane.queue.empty()) return;
        out = std::move(lane.queue.front());
        lane.queue.pop_front();
      }
      std::exception_ptr err;
      try {
        lane.pacer->acquire(out.frame.size());
        if (aggregate_) aggregate_->acquire(out.frame.size());
        lane.stream->write_all(std::move(out.frame));
      } catch (...) {
        err = std::current_exception();
      }
      {
        std::lock_guard lock(out.pending->mu);
        if (err && !out.pending->error) out.pending->error = err;
        --out.pending->left;
      }
      out.pending->cv.notify_all();
    }
  }

  void fail(std::exception_ptr e) {
    std::lock_guard lock(state_->mu);
    if (!state_->error) state_->error = e;
    state_->cv.notify_all();
  }

  void reader_loop(Lane& lane) {
    try {
      for (;;) {
        std::array<std::byte, kFrameHeaderBytes> hdr_bytes;
        if (!lane.stream->read_exact(hdr_bytes)) break;
        FrameHeader h;
        try {
          h = decode_frame_header(hdr_bytes);
        } catch (const wire::DecodeError&) {
          throw IntegrityError(lane.index, 0, 0, "bad frame magic");
        }
        Bytes payload(h.payload_len);
        if (h.payload_len > 0 && !lane.stream->read_exact(payload))
          throw TruncationError("stream " + std::to_string(lane.index) + " ended mid-frame");
        if (crc32_of(payload) != h.crc) throw IntegrityError(lane.index, h.msg_id, h.chunk_seq, "crc mismatch");
        if (h.n_chunks == 0 || h.chunk_seq >= h.n_chunks)
          throw IntegrityError(lane.index, h.msg_id, h.chunk_seq, "bad chunk numbering");
        std::lock_guard lock(state_->mu);
        auto& a = state_->partial[h.msg_id];
        if (a.chunks.empty()) {
          a.chunks.resize(h.n_chunks);
          a.have.assign(h.n_chunks, false);
        }
        if (a.chunks.size() != h.n_chunks || a.have[h.chunk_seq])
          throw IntegrityError(lane.index, h.msg_id, h.chunk_seq, "duplicate or inconsistent chunk");
        a.chunks[h.chunk_seq] = std::move(payload);
        a.have[h.chunk_seq] = true;
        ++a.received;
        state_->cv.notify_all();
      }
    } catch (...) {
      fail(std::current_exception());
    }
    std::lock_guard lock(state_->mu);
    --state_->open_readers;
    state_->cv.notify_all();
  }

  ChannelConfig cfg_;
  std::vector<std::unique_ptr<Lane>> lanes_;
  std::shared_ptr<TokenBucket> aggregate_;
  std::shared_ptr<State> state_;
  std::uint64_t next_send_id_ = 0;
  std::uint64_t next_recv_id_ = 0;
  std::size_t rr_ = 0;
  std::atomic<bool> closed_{false};
};

// ---------------------------------------------------------------------------
// Emulated network registry

/// In-process network: listeners register a name, connectors open channels to
/// it. Every connected pair gets its own emulated path.
class EmuNetwork {
 public:
  explicit EmuNetwork(EmuNetConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  [[nodiscard]] const EmuNetConfig& config() const { return cfg_; }

  /// Registers `name`. At most `max_streams` streams per connection are
  /// accepted (used to exercise partial connects).
  void listen(const std::string& name, std::uint32_t max_streams = UINT32_MAX) {
    std::lock_guard lock(mu_);
    listeners_[name].max_streams = max_streams;
    cv_.notify_all();
  }

  void unlisten(const std::string& name) {
    std::lock_guard lock(mu_);
    listeners_.erase(name);
  }

  /// Connector side of open_channel.
  std::unique_ptr<Channel> connect(const std::string& name, const ChannelConfig& cfg) {
    cfg.validate();
    std::unique_lock lock(mu_);
    const auto deadline = Clock::now() + std::chrono::milliseconds(cfg.connect_timeout_ms);
    if (!cv_.wait_until(lock, deadline, [&] { return listeners_.count(name) > 0; }))
      throw TimeoutError("connect to '" + name + "' timed out after " + std::to_string(cfg.connect_timeout_ms) + " ms");
    auto& l = listeners_[name];
    if (cfg.n_streams > l.max_streams) throw PartialConnectError(l.max_streams, cfg.n_streams);
    EmuNetConfig path_cfg = cfg_;
    path_cfg.seed = cfg_.seed + (path_counter_++) * 1000003ULL;
    auto path = std::make_shared<EmuPath>(path_cfg);
    std::vector<std::unique_ptr<ByteStream>> mine, theirs;
    for (std::uint32_t i = 0; i < cfg.n_streams; ++i) {
      auto [a, b] = path->make_stream(cfg.buffer_bytes);
      mine.push_back(std::move(a));
      theirs.push_back(std::move(b));
    }
    l.pending.push_back(std::make_unique<Channel>(std::move(theirs), cfg));
    l.paths.push_back(path);
    paths_.push_back(path);
    cv_.notify_all();
    return std::make_unique<Channel>(std::move(mine), cfg);
  }

  /// Listener side: the next channel opened to `name`.
  std::unique_ptr<Channel> accept(const std::string& name, std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    auto ready = [&] {
      auto it = listeners_.find(name);
      return it != listeners_.end() && !it->second.pending.empty();
    };
    if (!cv_.wait_for(lock, timeout, ready)) throw TimeoutError("accept on '" + name + "' timed out");
    auto& q = listeners_[name].pending;
    auto ch = std::move(q.front());
    q.pop_front();
    return ch;
  }

  /// Test hook: corrupt the `skip`-th next frame written on the most recent
  /// path, in the connector-to-listener direction.
  void corrupt_next_frame(std::int64_t skip = 0) {
    std::lock_guard lock(mu_);
    if (paths_.empty()) throw std::logic_error("no emulated path to corrupt");
    paths_.back()->forward->corrupt_after(skip);
  }

 private:
  struct Listener {
    std::uint32_t max_streams = UINT32_MAX;
    std::deque<std::unique_ptr<Channel>> pending;
    std::vector<std::shared_ptr<EmuPath>> paths;
  };
  EmuNetConfig cfg_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, Listener> listeners_;
  std::vector<std::shared_ptr<EmuPath>> paths_;
  std::uint64_t path_counter_ = 0;
};

/// Directly connected emulated channel pair (no registry).
inline std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> emulated_pair(const ChannelConfig& cfg,
                                                                                  const EmuNetConfig& net) {
  cfg.validate();
  auto path = std::make_shared<EmuPath>(net);
  std::vector<std::unique_ptr<ByteStream>> a, b;
  for (std::uint32_t i = 0; i < cfg.n_streams; ++i) {
    auto [x, y] = path->make_stream(cfg.buffer_bytes);
    a.push_back(std::move(x));
    b.push_back(std::move(y));
  }
  // The path outlives the channels through the pipes' shared link pointers.
  return {std::make_unique<Channel>(std::move(a), cfg), std::make_unique<Channel>(std::move(b), cfg)};
}

// ---------------------------------------------------------------------------
// TCP endpoints

struct TcpEndpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port_base = kDefaultPortBase;
  std::uint32_t peer_tag = 0;  // identifies the connecting side to the listener
};

struct EmuEndpoint {
  EmuNetwork* network = nullptr;
  std::string name;
};

using Endpoint = std::variant<TcpEndpoint, EmuEndpoint>;

namespace detail {

inline sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || !res)
    throw TransportError("cannot resolve host '" + host + "'");
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

inline constexpr std::size_t kHandshakeBytes = 12;

}  // namespace detail

inline std::unique_ptr<Channel> open_tcp_channel(const TcpEndpoint& ep, const ChannelConfig& cfg) {
  cfg.validate();
  if (static_cast<std::uint32_t>(ep.port_base) + cfg.n_streams > 65536)
    throw std::invalid_argument("port range exceeds 65535");
  const auto deadline = Clock::now() + std::chrono::milliseconds(cfg.connect_timeout_ms);
  std::vector<std::unique_ptr<ByteStream>> streams;
  for (std::uint32_t s = 0; s < cfg.n_streams; ++s) {
    const auto addr = detail::resolve(ep.host, static_cast<std::uint16_t>(ep.port_base + s));
    const int fd = detail::connect_with_deadline(addr, cfg.buffer_bytes, deadline);
    if (fd < 0) {
      if (s == 0)
        throw TimeoutError("connect to " + ep.host + ":" + std::to_string(ep.port_base) + " timed out after " +
                           std::to_string(cfg.connect_timeout_ms) + " ms");
      for (auto& st : streams) st->abort();
      throw PartialConnectError(s, cfg.n_streams);
    }
    auto stream = std::make_unique<detail::TcpStream>(fd);
    wire::Writer hs(detail::kHandshakeBytes);
    hs.put_tag("TGHS").put(ep.peer_tag).put(s);
    stream->write_all(std::move(hs).take());
    streams.push_back(std::move(stream));
  }
  return std::make_unique<Channel>(std::move(streams), cfg);
}

/// Listens on port_base .. port_base + n_streams - 1 and groups incoming
/// streams by the connector's peer tag.
class TcpListener {
 public:
  TcpListener(std::uint16_t port_base, const ChannelConfig& cfg, const std::string& bind_host = "0.0.0.0")
      : cfg_(cfg) {
    cfg_.validate();
    for (std::uint32_t s = 0; s < cfg_.n_streams; ++s) {
      const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
      if (fd < 0) throw TransportError(std::string("socket: ") + std::strerror(errno));
      int one = 1;
      ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      detail::set_buffers(fd, cfg_.buffer_bytes);
      auto addr = detail::resolve(bind_host, static_cast<std::uint16_t>(port_base + s));
      if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(fd, 64) < 0) {
        const std::string err = std::strerror(errno);
        ::close(fd);
        for (int f : fds_) ::close(f);
        throw TransportError("cannot listen on port " + std::to_string(port_base + s) + ": " + err);
      }
      fds_.push_back(fd);
    }
  }
  ~TcpListener() {
    for (int f : fds_) ::close(f);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  /// Next peer whose streams have all arrived: (peer tag, channel).
  std::pair<std::uint32_t, std::unique_ptr<Channel>> accept(std::chrono::milliseconds timeout) {
    const auto deadline = Clock::now() + timeout;
    for (;;) {
      for (auto it = partial_.begin(); it != partial_.end(); ++it) {
        if (std::all_of(it->second.begin(), it->second.end(), [](const auto& s) { return s != nullptr; })) {
          auto tag = it->first;
          auto streams = std::move(it->second);
          partial_.erase(it);
          return {tag, std::make_unique<Channel>(std::move(streams), cfg_)};
        }
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
      if (left <= 0) throw TimeoutError("accept timed out");
      std::vector<pollfd> pfds;
      for (int f : fds_) pfds.push_back({f, POLLIN, 0});
      const int rc = ::poll(pfds.data(), pfds.size(), static_cast<int>(left));
      if (rc <= 0) continue;
      for (const auto& p : pfds) {
        if (!(p.revents & POLLIN)) continue;
        const int fd = ::accept(p.fd, nullptr, nullptr);
        if (fd < 0) continue;
        detail::set_buffers(fd, cfg_.buffer_bytes);
        auto stream = std::make_unique<detail::TcpStream>(fd);
        std::array<std::byte, detail::kHandshakeBytes> hs;
        if (!stream->read_exact(hs)) continue;
        wire::Reader r(hs);
        if (!r.match_tag("TGHS")) continue;
        const auto tag = r.get<std::uint32_t>();
        const auto idx = r.get<std::uint32_t>();
        if (idx >= cfg_.n_streams) continue;
        auto& slots = partial_[tag];
        if (slots.empty()) slots.resize(cfg_.n_streams);
        slots[idx] = std::move(stream);
      }
    }
  }

 private:
  ChannelConfig cfg_;
  std::vector<int> fds_;
  std::map<std::uint32_t, std::vector<std::unique_ptr<ByteStream>>> partial_;
};

/// Opens a channel to `endpoint` over the matching backend.
inline std::unique_ptr<Channel> open_channel(const Endpoint& endpoint, const ChannelConfig& cfg) {
  if (const auto* tcp = std::get_if<TcpEndpoint>(&endpoint)) return open_tcp_channel(*tcp, cfg);
  const auto& emu = std::get<EmuEndpoint>(endpoint);
  if (!emu.network) throw std::invalid_argument("emulated endpoint without a network");
  return emu.network->connect(emu.name, cfg);
}

// ---------------------------------------------------------------------------
// Path measurement

struct PathEstimate {
  double rtt_s = 0.0;
  double throughput_bytes_per_s = 0.0;
};

namespace detail {
inline constexpr std::uint8_t kProbePing = 0;
inline constexpr std::uint8_t kProbeBulk = 1;
inline constexpr std::uint8_t kProbeStop = 2;

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace detail

/// Peer side of measure_path: acknowledges probes until told to stop.
inline void serve_path_probes(Channel& ch) {
  for (;;) {
    const Bytes msg = ch.recv_message();
    if (msg.empty() || std::to_integer<std::uint8_t>(msg[0]) == detail::kProbeStop) return;
    wire::Writer w;
    w.put(static_cast<std::uint64_t>(msg.size()));
    ch.send_message(w.bytes());
  }
}

/// Median round-trip time of tiny probes, and median one-way throughput of
/// `probe_bytes` transfers (ack time minus the measured RTT). The peer must
/// run serve_path_probes.
inline PathEstimate measure_path(Channel& ch, std::size_t probe_bytes, std::uint32_t repetitions) {
  if (repetitions == 0) throw std::invalid_argument("repetitions must be >= 1");
  std::vector<double> rtts, rates;
  const Bytes ping{std::byte{detail::kProbePing}};
  for (std::uint32_t i = 0; i < repetitions; ++i) {
    const auto t0 = Clock::now();
    ch.send_message(ping);
    ch.recv_message();
    rtts.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
  }
  PathEstimate est;
  est.rtt_s = detail::median(rtts);
  if (probe_bytes > 0) {
    Bytes bulk(std::max<std::size_t>(probe_bytes, 1));
    bulk[0] = std::byte{detail::kProbeBulk};
    for (std::uint32_t i = 0; i < repetitions; ++i) {
      const auto t0 = Clock::now();
      ch.send_message(bulk);
      ch.recv_message();
      const double t = std::chrono::duration<double>(Clock::now() - t0).count() - est.rtt_s;
      rates.push_back(t > 0.0 ? static_cast<double>(bulk.size()) / t : 0.0);
    }
    est.throughput_bytes_per_s = detail::median(rates);
  }
  ch.send_message(Bytes{std::byte{detail::kProbeStop}});
  return est;
}

}  // namespace treegrid::transport
