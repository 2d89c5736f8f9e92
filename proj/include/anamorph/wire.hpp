#pragma once

// Length-prefixed frame protocol for remote model backends, plus the raw
// tensor blob file format that reuses the same framing.
//
// Frame: u32 little-endian header length, UTF-8 JSON header, payload.
// A header with "shape": [c, h, w] carries c*h*w float32 little-endian
// samples in planar (channel-major) order; other frames carry no payload.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "anamorph/errors.hpp"
#include "anamorph/image.hpp"
#include "anamorph/sync.hpp"
#include "anamorph/uvmap.hpp"
#include "json.hpp"

namespace anamorph {

using json = nlohmann::json;

inline constexpr std::uint32_t kMaxHeaderBytes = 1u << 20;
inline constexpr int kProtocolVersion = 1;

struct Frame {
  json header;
  std::vector<std::uint8_t> payload;
};

// ---------------------------------------------------------------------------
// Byte streams.

class ByteStream {
 public:
  virtual ~ByteStream() = default;
  virtual void write_all(const std::uint8_t* data, std::size_t n) = 0;
  /// Reads up to n bytes; returns 0 only at end of stream.
  virtual std::size_t read_some(std::uint8_t* data, std::size_t n) = 0;
};

/// Stream over a pair of file descriptors (the same one for sockets).
class FdStream : public ByteStream {
 public:
  FdStream(int read_fd, int write_fd, bool owns = true) : in_(read_fd), out_(write_fd), owns_(owns) {}
  FdStream(const FdStream&) = delete;
  FdStream& operator=(const FdStream&) = delete;
  ~FdStream() override { close(); }

  void write_all(const std::uint8_t* data, std::size_t n) override {
    while (n > 0) {
      const ssize_t w = ::write(out_, data, n);
      if (w < 0) {
        if (errno == EINTR) continue;
        throw BackendError(std::string("stream write failed: ") + std::strerror(errno));
      }
      data += w;
      n -= static_cast<std::size_t>(w);
    }
  }

  std::size_t read_some(std::uint8_t* data, std::size_t n) override {
    for (;;) {
      const ssize_t r = ::read(in_, data, n);
      if (r >= 0) return static_cast<std::size_t>(r);
      if (errno != EINTR) throw BackendError(std::string("stream read failed: ") + std::strerror(errno));
    }
  }

  /// Signals end of stream to the peer without closing the read side.
  void shutdown_write() {
    if (out_ == in_)
      ::shutdown(out_, SHUT_WR);
    else if (out_ >= 0) {
      ::close(out_);
      out_ = -1;
    }
  }

  void close() {
    if (!owns_) return;
    if (in_ >= 0) ::close(in_);
    if (out_ >= 0 && out_ != in_) ::close(out_);
    in_ = out_ = -1;
  }

 private:
  int in_;
  int out_;
  bool owns_;
};

/// In-memory stream, handy for tests and blob files.
class BufferStream : public ByteStream {
 public:
  BufferStream() = default;
  explicit BufferStream(std::vector<std::uint8_t> data) : data_(std::move(data)) {}

  void write_all(const std::uint8_t* data, std::size_t n) override { data_.insert(data_.end(), data, data + n); }
  std::size_t read_some(std::uint8_t* data, std::size_t n) override {
    n = std::min(n, data_.size() - pos_);
    std::memcpy(data, data_.data() + pos_, n);
    pos_ += n;
    return n;
  }

  const std::vector<std::uint8_t>& bytes() const { return data_; }
  bool exhausted() const { return pos_ == data_.size(); }

 private:
  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
};

namespace detail {

/// Fills the buffer; false on a clean end of stream before the first byte.
inline bool read_exact(ByteStream& s, std::uint8_t* data, std::size_t n, bool eof_ok) {
  std::size_t got = 0;
  while (got < n) {
    const std::size_t r = s.read_some(data + got, n - got);
    if (r == 0) {
      if (got == 0 && eof_ok) return false;
      throw TruncationError("stream ended inside a frame");
    }
    got += r;
  }
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Frames.

/// Number of payload bytes a header announces.
inline std::size_t payload_bytes(const json& header) {
  if (!header.is_object()) throw FormatError("frame header must be a JSON object");
  if (!header.contains("shape")) return 0;
  const json& shape = header["shape"];
  if (!shape.is_array() || shape.size() != 3) throw FormatError("shape must be [c, h, w]");
  std::size_t n = 4;
  for (const auto& d : shape) {
    if (!d.is_number_unsigned() && !(d.is_number_integer() && d.get<long long>() >= 0))
      throw FormatError("shape entries must be non-negative integers");
    n *= d.get<std::size_t>();
  }
  if (header.value("dtype", std::string("f32le")) != "f32le") throw FormatError("unsupported dtype");
  return n;
}

inline void write_frame(ByteStream& s, const Frame& f) {
  if (payload_bytes(f.header) != f.payload.size()) throw FormatError("payload size does not match the header shape");
  const std::string h = f.header.dump();
  std::vector<std::uint8_t> prefix;
  detail::put_u32(prefix, static_cast<std::uint32_t>(h.size()));
  s.write_all(prefix.data(), prefix.size());
  s.write_all(reinterpret_cast<const std::uint8_t*>(h.data()), h.size());
  if (!f.payload.empty()) s.write_all(f.payload.data(), f.payload.size());
}

/// Next frame, or nothing at a clean end of stream.
inline std::optional<Frame> read_frame(ByteStream& s) {
  std::uint8_t len_bytes[4];
  if (!detail::read_exact(s, len_bytes, 4, true)) return std::nullopt;
  const std::uint32_t len = detail::get_u32(std::span<const std::uint8_t>(len_bytes, 4), 0);
  if (len > kMaxHeaderBytes) throw FormatError("frame header too large");
  std::string text(len, '\0');
  detail::read_exact(s, reinterpret_cast<std::uint8_t*>(text.data()), len, false);
  Frame f;
  try {
    f.header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad frame header: ") + e.what());
  }
  if (!f.header.is_object() || !f.header.contains("op") || !f.header["op"].is_string())
    throw FormatError("frame header needs a string 'op'");
  f.payload.resize(payload_bytes(f.header));
  if (!f.payload.empty()) detail::read_exact(s, f.payload.data(), f.payload.size(), false);
  return f;
}

inline Frame error_frame(const std::string& message) { return {json{{"op", "error"}, {"message", message}}, {}}; }

/// Planar f32le payload from an interleaved image.
inline std::vector<std::uint8_t> to_payload(const Image& img) {
  std::vector<std::uint8_t> out;
  out.reserve(img.samples().size() * 4);
  for (std::size_t c = 0; c < img.channels(); ++c)
    for (std::size_t y = 0; y < img.height(); ++y)
      for (std::size_t x = 0; x < img.width(); ++x) detail::put_f32(out, img.at(x, y, c));
  return out;
}

inline Image from_payload(std::size_t c, std::size_t h, std::size_t w, std::span<const std::uint8_t> bytes) {
  if (bytes.size() != 4 * c * h * w) throw FormatError("payload size does not match shape");
  Image img(w, h, c);
  std::size_t at = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x, at += 4) img.at(x, y, ch) = detail::get_f32(bytes, at);
  return img;
}

inline json shape_of(const Image& img) { return json::array({img.channels(), img.height(), img.width()}); }

inline Frame tensor_frame(const std::string& op, const Image& img, json extra = json::object()) {
  extra["op"] = op;
  extra["shape"] = shape_of(img);
  extra["dtype"] = "f32le";
  return {std::move(extra), to_payload(img)};
}

inline Image frame_image(const Frame& f) {
  if (!f.header.contains("shape")) throw FormatError("frame carries no tensor");
  const auto& s = f.header["shape"];
  return from_payload(s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>(), f.payload);
}

// ---------------------------------------------------------------------------
// Tensor blob files: a single frame with op "tensor". Lossless for floats,
// including MISSING samples.

inline std::vector<std::uint8_t> encode_tensor(const Image& img) {
  BufferStream s;
  write_frame(s, tensor_frame("tensor", img));
  return s.bytes();
}

inline Image decode_tensor(std::vector<std::uint8_t> bytes) {
  BufferStream s(std::move(bytes));
  const auto f = read_frame(s);
  if (!f) throw TruncationError("empty tensor file");
  if (f->header["op"] != "tensor") throw FormatError("not a tensor blob");
  if (!s.exhausted()) throw FormatError("trailing bytes after tensor blob");
  return frame_image(*f);
}

inline void write_tensor(const Image& img, const std::filesystem::path& path) {
  detail::write_file(path, encode_tensor(img));
}

inline Image read_tensor(const std::filesystem::path& path) { return decode_tensor(detail::read_file(path)); }

// ---------------------------------------------------------------------------
// Transports.

inline std::unique_ptr<FdStream> connect_tcp(const std::string& host, const std::string& port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0)
    throw HandshakeError("cannot resolve " + host + ": " + ::gai_strerror(rc));
  int fd = -1;
  for (addrinfo* p = res; p; p = p->ai_next) {
    fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw HandshakeError("cannot connect to " + host + ":" + port);
  return std::make_unique<FdStream>(fd, fd);
}

/// Listening socket on the loopback interface; port 0 picks a free port.
class TcpListener {
 public:
  explicit TcpListener(std::uint16_t port = 0) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw BackendError("socket() failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 4) != 0) {
      ::close(fd_);
      throw BackendError(std::string("cannot listen: ") + std::strerror(errno));
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  ~TcpListener() { ::close(fd_); }

  std::uint16_t port() const { return port_; }

  std::unique_ptr<FdStream> accept() {
    const int c = ::accept(fd_, nullptr, nullptr);
    if (c < 0) throw BackendError(std::string("accept failed: ") + std::strerror(errno));
    return std::make_unique<FdStream>(c, c);
  }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

/// Child process spoken to over its stdin/stdout.
class ChildStream : public ByteStream {
 public:
  explicit ChildStream(const std::string& command) {
    // A dead child must surface as a write error, not kill this process.
    ::signal(SIGPIPE, SIG_IGN);
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0) throw HandshakeError("pipe failed");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw HandshakeError("pipe failed");
    }
    pid_ = ::fork();
    if (pid_ < 0) throw HandshakeError("fork failed");
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    stream_ = std::make_unique<FdStream>(from_child[0], to_child[1]);
  }
  ChildStream(const ChildStream&) = delete;
  ChildStream& operator=(const ChildStream&) = delete;
  ~ChildStream() override {
    stream_.reset();
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }

  void write_all(const std::uint8_t* data, std::size_t n) override { stream_->write_all(data, n); }
  std::size_t read_some(std::uint8_t* data, std::size_t n) override { return stream_->read_some(data, n); }

 private:
  pid_t pid_ = -1;
  std::unique_ptr<FdStream> stream_;
};

/// Opens "tcp://host:port" or "exec:<shell command>".
inline std::unique_ptr<ByteStream> open_backend_stream(const std::string& address) {
  if (address.rfind("tcp://", 0) == 0) {
    const std::string rest = address.substr(6);
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size())
      throw ParseError("bridge address must be tcp://host:port");
    return connect_tcp(rest.substr(0, colon), rest.substr(colon + 1));
  }
  if (address.rfind("exec:", 0) == 0) {
    if (address.size() == 5) throw ParseError("empty bridge command");
    return std::make_unique<ChildStream>(address.substr(5));
  }
  throw ParseError("unknown bridge address '" + address + "'");
}

// ---------------------------------------------------------------------------
// Client side.

/// Denoiser and VAE served by a remote process. Requests are issued one at a
/// time; every request gets exactly one response, in order.
class BridgeClient : public Denoiser, public Vae {
 public:
  explicit BridgeClient(std::unique_ptr<ByteStream> stream) : stream_(std::move(stream)) { handshake(); }

  LatentTensor velocity(const LatentTensor& z, double t, const std::string& prompt_id) override {
    const Image out = call("velocity", z.data, {{"t", t}, {"prompt_id", prompt_id}}, z.channels(), z.extent());
    return {out, z.scale_factor};
  }

  LatentTensor encode(const Image& x) override {
    const auto sf = static_cast<std::size_t>(scale_factor_);
    if (x.width() % sf || x.height() % sf)
      throw SizeError("image " + to_string(x.extent()) + " is not a multiple of the scale factor");
    return {call("encode", x, json::object(), latent_channels_, {x.width() / sf, x.height() / sf}), scale_factor_};
  }

  Image decode(const LatentTensor& z) override {
    const auto sf = static_cast<std::size_t>(scale_factor_);
    return call("decode", z.data, json::object(), 0, {z.width() * sf, z.height() * sf});
  }

  int scale_factor() const override { return scale_factor_; }
  std::size_t latent_channels() const override { return latent_channels_; }
  std::optional<std::vector<double>> schedule() const override { return schedule_; }
  bool concurrent() const override { return false; }
  const json& hello() const { return hello_; }

 private:
  void handshake() {
    try {
      write_frame(*stream_, {json{{"op", "hello"}, {"version", kProtocolVersion}, {"client", "anamorph"}}, {}});
      const auto reply = read_frame(*stream_);
      if (!reply) throw HandshakeError("backend closed the connection during hello");
      const json& h = reply->header;
      if (h["op"] == "error") throw HandshakeError("backend refused hello: " + h.value("message", std::string()));
      if (h["op"] != "hello") throw HandshakeError("expected a hello reply");
      if (!h.contains("scale_factor") || !h["scale_factor"].is_number_integer() || h["scale_factor"].get<int>() < 1)
        throw HandshakeError("hello reply lacks a positive scale_factor");
      if (!h.contains("latent_channels") || !h["latent_channels"].is_number_integer() ||
          h["latent_channels"].get<int>() < 1)
        throw HandshakeError("hello reply lacks positive latent_channels");
      scale_factor_ = h["scale_factor"].get<int>();
      latent_channels_ = h["latent_channels"].get<std::size_t>();
      if (h.contains("schedule") && !h["schedule"].is_null()) {
        std::vector<double> ts = h["schedule"].get<std::vector<double>>();
        validate_schedule(ts);
        schedule_ = std::move(ts);
      }
      hello_ = h;
    } catch (const HandshakeError&) {
      throw;
    } catch (const std::exception& e) {
      throw HandshakeError(std::string("handshake failed: ") + e.what());
    }
  }

  /// One request/response exchange. expect_channels 0 accepts any count.
  Image call(const std::string& op, const Image& input, json extra, std::size_t expect_channels, Extent expect) {
    std::lock_guard lock(mutex_);
    std::optional<Frame> reply;
    try {
      write_frame(*stream_, tensor_frame(op, input, std::move(extra)));
      reply = read_frame(*stream_);
    } catch (const BackendError&) {
      throw;
    } catch (const std::exception& e) {
      throw BackendError(op + " exchange failed: " + e.what());
    }
    if (!reply) throw BackendError("backend closed the connection during " + op);
    const json& h = reply->header;
    if (h["op"] == "error") throw BackendError("backend error on " + op + ": " + h.value("message", std::string()));
    if (h["op"] != op) throw BackendError("expected a " + op + " reply, got " + h["op"].get<std::string>());
    Image out = frame_image(*reply);
    if (out.extent() != expect || (expect_channels && out.channels() != expect_channels))
      throw BackendError(op + " reply has an unexpected shape " + h["shape"].dump());
    for (float s : out.samples())
      if (!std::isfinite(s)) throw BackendError(op + " reply contains non-finite samples");
    return out;
  }

  std::unique_ptr<ByteStream> stream_;
  std::mutex mutex_;
  int scale_factor_ = 1;
  std::size_t latent_channels_ = 0;
  std::optional<std::vector<double>> schedule_;
  json hello_;
};

// ---------------------------------------------------------------------------
// Server side, backed by any in-process Denoiser and Vae. Used as a mock
// model process in tests and by the mock_bridge tool.

class StubResponder {
 public:
  StubResponder(Denoiser& denoiser, Vae& vae) : denoiser_(denoiser), vae_(vae) {}

  /// Answer an error frame after this many tensor requests (testing aid).
  void fail_after(std::size_t n) { fail_after_ = n; }
  /// Refuse the hello exchange (testing aid).
  void refuse_hello(bool r) { refuse_hello_ = r; }

  /// Handles one request and returns the response.
  Frame respond(const Frame& request) {
    const std::string op = request.header["op"].get<std::string>();
    if (op == "hello") {
      if (refuse_hello_) return error_frame("hello refused");
      json h{{"op", "hello"}, {"version", kProtocolVersion}, {"scale_factor", vae_.scale_factor()},
             {"latent_channels", vae_.latent_channels()}, {"serial", true}};
      if (auto s = denoiser_.schedule()) h["schedule"] = *s;
      return {h, {}};
    }
    if (op != "velocity" && op != "encode" && op != "decode") return error_frame("unknown op '" + op + "'");
    if (fail_after_ && served_ >= *fail_after_) return error_frame("injected failure");
    ++served_;
    try {
      const Image in = frame_image(request);
      const int sf = vae_.scale_factor();
      if (op == "velocity") {
        const double t = request.header.at("t").get<double>();
        const std::string prompt = request.header.value("prompt_id", std::string());
        return tensor_frame(op, denoiser_.velocity({in, sf}, t, prompt).data);
      }
      if (op == "encode") return tensor_frame(op, vae_.encode(in).data);
      return tensor_frame(op, vae_.decode({in, sf}));
    } catch (const std::exception& e) {
      return error_frame(e.what());
    }
  }

  /// Serves until the peer closes the stream.
  void serve(ByteStream& s) {
    while (auto request = read_frame(s)) write_frame(s, respond(*request));
  }

  std::size_t served() const { return served_; }

 private:
  Denoiser& denoiser_;
  Vae& vae_;
  std::optional<std::size_t> fail_after_;
  bool refuse_hello_ = false;
  std::size_t served_ = 0;
};

}  // namespace anamorph
