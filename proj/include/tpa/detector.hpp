#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "tpa/errors.hpp"
#include "tpa/geometry.hpp"
#include "tpa/image.hpp"
#include "tpa/nn.hpp"

namespace tpa {

/// Pre-NMS, pre-threshold detector outputs: one box and one probability
/// vector per anchor cell. Probabilities cover background (entry 0) and the
/// C foreground classes (entries 1..C); each vector sums to one.
struct RawOutputs {
  int num_classes = 0;
  std::vector<Box> boxes;
  std::vector<double> probs;  // cells x (num_classes + 1)

  int cells() const { return static_cast<int>(boxes.size()); }
  double fg_prob(int cell, int cls) const {
    return probs[static_cast<std::size_t>(cell) * (num_classes + 1) + 1 + cls];
  }
  double background(int cell) const {
    return probs[static_cast<std::size_t>(cell) * (num_classes + 1)];
  }
  int predicted_class(int cell) const {
    int best = 0;
    for (int c = 1; c < num_classes; ++c)
      if (fg_prob(cell, c) > fg_prob(cell, best)) best = c;
    return best;
  }
  double score(int cell) const { return fg_prob(cell, predicted_class(cell)); }
  std::vector<double> class_probs(int cell) const {
    std::vector<double> p(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) p[c] = fg_prob(cell, c);
    return p;
  }
};

/// Gradient of a scalar w.r.t. RawOutputs, same layout. Box entries are
/// d/d(cx, cy, w, h).
struct RawGradient {
  std::vector<std::array<double, 4>> boxes;
  std::vector<double> probs;

  static RawGradient zeros_like(const RawOutputs& r) {
    return RawGradient{std::vector<std::array<double, 4>>(r.boxes.size(), {0, 0, 0, 0}),
                       std::vector<double>(r.probs.size(), 0.0)};
  }
  double& prob(const RawOutputs& r, int cell, int fg_cls) {
    return probs[static_cast<std::size_t>(cell) * (r.num_classes + 1) + 1 + fg_cls];
  }
};

/// Scalar functional over raw outputs. Returns the value and writes its
/// gradient into the (zero-initialized) second argument.
using LossFunctional = std::function<double(const RawOutputs&, RawGradient&)>;

struct LossGradient {
  double loss = 0.0;
  Image gradient;
};

/// Behavioral contract every attack consumes. Implementations must be
/// deterministic and safe for concurrent const use.
class Detector {
 public:
  virtual ~Detector() = default;

  virtual int num_classes() const = 0;
  virtual int input_height() const = 0;
  virtual int input_width() const = 0;

  virtual RawOutputs forward(const Image& image) const = 0;
  /// Thresholding and NMS over raw outputs; no forward pass.
  virtual DetectionSet detections_from(const RawOutputs& raw, SourceTag tag) const = 0;
  virtual DetectionSet detect(const Image& image, SourceTag tag = SourceTag::clean) const = 0;
  /// Gradient of `loss(forward(image))` w.r.t. every input pixel. `term`
  /// names the loss in the error raised when it is not finite.
  virtual LossGradient loss_gradient(const Image& image, const LossFunctional& loss,
                                     const std::string& term = "loss") const = 0;
};

struct ToyDetectorConfig {
  int image_height = 128;
  int image_width = 128;
  int num_classes = 3;
  int stride = 8;
  double anchor = 32.0;
  double score_threshold = 0.3;
  double nms_iou = 0.45;
};

/// Architecture: three stride-2 convolutions down to stride 8, three 3x3
/// convolutions with dilation 1, 2, 4 for context, then a 1x1 head emitting
/// (C + 1) class logits and four box offsets per cell.
inline std::vector<nn::ConvSpec> toy_architecture(int num_classes) {
  return {
      {3, 16, 3, 2, 1, 1},  {16, 32, 3, 2, 1, 1}, {32, 32, 3, 2, 1, 1}, {32, 48, 3, 1, 1, 1},
      {48, 48, 3, 1, 2, 2}, {48, 48, 3, 1, 4, 4}, {48, num_classes + 5, 1, 1, 0, 1},
  };
}

class ToyDetector final : public Detector {
 public:
  static constexpr double kMinLogSize = -4.0;
  static constexpr double kMaxLogSize = 3.0;

  explicit ToyDetector(ToyDetectorConfig cfg = {}, std::uint64_t seed = 0)
      : cfg_(cfg), net_(toy_architecture(cfg.num_classes)) {
    validate_config();
    net_.initialize(seed);
    // Background prior: fresh models predict background with high probability.
    auto& head = net_.layers().back();
    head.bias()(0) = 3.0;
  }

  ToyDetector(ToyDetectorConfig cfg, nn::Network net) : cfg_(cfg), net_(std::move(net)) {
    validate_config();
    if (net_.specs() != toy_architecture(cfg_.num_classes))
      throw ContractError("network layers do not match the toy detector architecture");
  }

  const ToyDetectorConfig& config() const { return cfg_; }
  nn::Network& network() { return net_; }
  const nn::Network& network() const { return net_; }

  int num_classes() const override { return cfg_.num_classes; }
  int input_height() const override { return cfg_.image_height; }
  int input_width() const override { return cfg_.image_width; }
  int grid_height() const { return (cfg_.image_height + cfg_.stride - 1) / cfg_.stride; }
  int grid_width() const { return (cfg_.image_width + cfg_.stride - 1) / cfg_.stride; }

  void check_input(const Image& image) const {
    if (image.channels != 3 || image.height != cfg_.image_height ||
        image.width != cfg_.image_width) {
      throw ContractError("detector expects 3x" + std::to_string(cfg_.image_height) + "x" +
                          std::to_string(cfg_.image_width) + " input, got " +
                          std::to_string(image.channels) + "x" + std::to_string(image.height) +
                          "x" + std::to_string(image.width));
    }
  }

  nn::Feature to_feature(const Image& image) const {
    nn::Feature f;
    f.height = image.height;
    f.width = image.width;
    f.data = Eigen::Map<const nn::Mat>(image.data.data(),
                                       static_cast<Eigen::Index>(image.plane()), 3)
                 .array() -
             0.5;
    return f;
  }

  /// Raw head output -> decoded boxes and softmax probabilities.
  RawOutputs decode(const nn::Feature& head) const {
    const int C = cfg_.num_classes;
    RawOutputs r;
    r.num_classes = C;
    const int cells = static_cast<int>(head.data.rows());
    r.boxes.reserve(cells);
    r.probs.resize(static_cast<std::size_t>(cells) * (C + 1));
    for (int i = 0; i < cells; ++i) {
      const int gy = i / head.width, gx = i % head.width;
      double mx = head.data(i, 0);
      for (int c = 1; c <= C; ++c) mx = std::max(mx, head.data(i, c));
      double sum = 0.0;
      for (int c = 0; c <= C; ++c) {
        const double e = std::exp(head.data(i, c) - mx);
        r.probs[static_cast<std::size_t>(i) * (C + 1) + c] = e;
        sum += e;
      }
      for (int c = 0; c <= C; ++c) r.probs[static_cast<std::size_t>(i) * (C + 1) + c] /= sum;
      const double s = cfg_.stride;
      const double cx = (gx + 0.5 + head.data(i, C + 1)) * s;
      const double cy = (gy + 0.5 + head.data(i, C + 2)) * s;
      const double w = cfg_.anchor * std::exp(std::clamp(head.data(i, C + 3), kMinLogSize, kMaxLogSize));
      const double h = cfg_.anchor * std::exp(std::clamp(head.data(i, C + 4), kMinLogSize, kMaxLogSize));
      r.boxes.push_back(Box::center(cx, cy, w, h));
    }
    return r;
  }

  /// Chain rule from d/d(raw outputs) to d/d(head output).
  nn::Mat decode_backward(const nn::Feature& head, const RawOutputs& r,
                          const RawGradient& g) const {
    const int C = cfg_.num_classes;
    nn::Mat d = nn::Mat::Zero(head.data.rows(), head.data.cols());
    for (int i = 0; i < r.cells(); ++i) {
      const double* p = &r.probs[static_cast<std::size_t>(i) * (C + 1)];
      const double* gp = &g.probs[static_cast<std::size_t>(i) * (C + 1)];
      double dot = 0.0;
      for (int c = 0; c <= C; ++c) dot += gp[c] * p[c];
      for (int c = 0; c <= C; ++c) d(i, c) = p[c] * (gp[c] - dot);
      const auto& gb = g.boxes[i];
      d(i, C + 1) = gb[0] * cfg_.stride;
      d(i, C + 2) = gb[1] * cfg_.stride;
      const double tw = head.data(i, C + 3), th = head.data(i, C + 4);
      if (tw > kMinLogSize && tw < kMaxLogSize) d(i, C + 3) = gb[2] * r.boxes[i].w();
      if (th > kMinLogSize && th < kMaxLogSize) d(i, C + 4) = gb[3] * r.boxes[i].h();
    }
    return d;
  }

  nn::Feature head(const Image& image, nn::Network::Trace* trace = nullptr) const {
    check_input(image);
    return net_.forward(to_feature(image), trace);
  }

  RawOutputs forward(const Image& image) const override { return decode(head(image)); }

  DetectionSet detections_from(const RawOutputs& r, SourceTag tag) const override {
    std::vector<Detection> dets;
    for (int i = 0; i < r.cells(); ++i) {
      if (r.score(i) > cfg_.score_threshold)
        dets.push_back(Detection::make(r.boxes[i], r.class_probs(i), i));
    }
    return DetectionSet::from(nms(std::move(dets), cfg_.nms_iou), tag);
  }

  DetectionSet detect(const Image& image, SourceTag tag = SourceTag::clean) const override {
    return detections_from(forward(image), tag);
  }

  LossGradient loss_gradient(const Image& image, const LossFunctional& loss,
                             const std::string& term = "loss") const override {
    nn::Network::Trace trace;
    const nn::Feature h = head(image, &trace);
    const RawOutputs raw = decode(h);
    RawGradient g = RawGradient::zeros_like(raw);
    const double value = loss(raw, g);
    if (!std::isfinite(value)) throw NumericError("non-finite value of loss term '" + term + "'");
    const nn::Mat dhead = decode_backward(h, raw, g);
    const nn::Feature dx = net_.backward(trace, dhead, nullptr);
    LossGradient out{value, Image(3, image.height, image.width)};
    Eigen::Map<nn::Mat>(out.gradient.data.data(), static_cast<Eigen::Index>(image.plane()), 3) =
        dx.data;
    for (double v : out.gradient.data)
      if (!std::isfinite(v)) throw NumericError("non-finite gradient of loss term '" + term + "'");
    return out;
  }

 private:
  void validate_config() {
    // Float-round the real-valued settings so a checkpoint round trip is exact.
    auto snap = [](double v) { return static_cast<double>(static_cast<float>(v)); };
    cfg_.anchor = snap(cfg_.anchor);
    cfg_.score_threshold = snap(cfg_.score_threshold);
    cfg_.nms_iou = snap(cfg_.nms_iou);
    if (cfg_.num_classes < 1 || cfg_.image_height < 8 || cfg_.image_width < 8 || cfg_.stride != 8)
      throw ContractError("invalid toy detector configuration");
    const auto specs = toy_architecture(cfg_.num_classes);
    int h = cfg_.image_height, w = cfg_.image_width;
    for (const auto& s : specs) {
      h = s.out_size(h);
      w = s.out_size(w);
    }
    if (h != grid_height() || w != grid_width())
      throw ContractError("image size incompatible with the stride-8 grid");
  }

  ToyDetectorConfig cfg_;
  nn::Network net_;
};

/// Forwards to another detector and counts forward passes.
class CountingDetector final : public Detector {
 public:
  explicit CountingDetector(const Detector& inner) : inner_(inner) {}

  long forwards() const { return forwards_.load(); }
  void reset() { forwards_ = 0; }

  int num_classes() const override { return inner_.num_classes(); }
  int input_height() const override { return inner_.input_height(); }
  int input_width() const override { return inner_.input_width(); }
  RawOutputs forward(const Image& image) const override {
    ++forwards_;
    return inner_.forward(image);
  }
  DetectionSet detections_from(const RawOutputs& raw, SourceTag tag) const override {
    return inner_.detections_from(raw, tag);
  }
  DetectionSet detect(const Image& image, SourceTag tag) const override {
    ++forwards_;
    return inner_.detect(image, tag);
  }
  LossGradient loss_gradient(const Image& image, const LossFunctional& loss,
                             const std::string& term) const override {
    ++forwards_;
    return inner_.loss_gradient(image, loss, term);
  }

 private:
  const Detector& inner_;
  mutable std::atomic<long> forwards_{0};
};

// Checkpoint layout (all little-endian):
//   8 bytes magic "TPADET01", u32 version, u32 image_h, u32 image_w,
//   u32 num_classes, u32 stride, f32 anchor, f32 score_threshold, f32 nms_iou,
//   u32 layer count, then per layer 6 x u32 (in, out, kernel, stride, pad,
//   dilation), then per layer float32 weights (fan_in x out, row-major by
//   fan_in index) followed by float32 biases.
inline constexpr char kCheckpointMagic[8] = {'T', 'P', 'A', 'D', 'E', 'T', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& o, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  o.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_f32(std::ostream& o, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(o, u);
}
inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw LoadError("truncated checkpoint: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline double get_f32(std::istream& in, const std::string& path) {
  const std::uint32_t u = get_u32(in, path);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ToyDetector& model) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw Error("cannot write checkpoint: " + path);
  const auto& c = model.config();
  o.write(kCheckpointMagic, 8);
  detail::put_u32(o, kCheckpointVersion);
  detail::put_u32(o, static_cast<std::uint32_t>(c.image_height));
  detail::put_u32(o, static_cast<std::uint32_t>(c.image_width));
  detail::put_u32(o, static_cast<std::uint32_t>(c.num_classes));
  detail::put_u32(o, static_cast<std::uint32_t>(c.stride));
  detail::put_f32(o, c.anchor);
  detail::put_f32(o, c.score_threshold);
  detail::put_f32(o, c.nms_iou);
  const auto& layers = model.network().layers();
  detail::put_u32(o, static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    const auto& s = l.spec();
    for (int v : {s.in, s.out, s.kernel, s.stride, s.pad, s.dilation})
      detail::put_u32(o, static_cast<std::uint32_t>(v));
  }
  for (const auto& l : layers) {
    for (Eigen::Index r = 0; r < l.weight().rows(); ++r)
      for (Eigen::Index k = 0; k < l.weight().cols(); ++k) detail::put_f32(o, l.weight()(r, k));
    for (Eigen::Index k = 0; k < l.bias().size(); ++k) detail::put_f32(o, l.bias()(k));
  }
  if (!o) throw Error("failed writing checkpoint: " + path);
}

inline ToyDetector load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint: " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw LoadError("bad checkpoint magic: " + path);
  const auto version = detail::get_u32(in, path);
  if (version != kCheckpointVersion)
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  ToyDetectorConfig cfg;
  cfg.image_height = static_cast<int>(detail::get_u32(in, path));
  cfg.image_width = static_cast<int>(detail::get_u32(in, path));
  cfg.num_classes = static_cast<int>(detail::get_u32(in, path));
  cfg.stride = static_cast<int>(detail::get_u32(in, path));
  cfg.anchor = detail::get_f32(in, path);
  cfg.score_threshold = detail::get_f32(in, path);
  cfg.nms_iou = detail::get_f32(in, path);
  if (cfg.num_classes < 1 || cfg.num_classes > 1000)
    throw LoadError("checkpoint declares an invalid class count");
  const auto n_layers = detail::get_u32(in, path);
  const auto expected = toy_architecture(cfg.num_classes);
  if (n_layers != expected.size()) throw LoadError("checkpoint layer count mismatch: " + path);
  std::vector<nn::ConvSpec> specs;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    nn::ConvSpec s;
    s.in = static_cast<int>(detail::get_u32(in, path));
    s.out = static_cast<int>(detail::get_u32(in, path));
    s.kernel = static_cast<int>(detail::get_u32(in, path));
    s.stride = static_cast<int>(detail::get_u32(in, path));
    s.pad = static_cast<int>(detail::get_u32(in, path));
    s.dilation = static_cast<int>(detail::get_u32(in, path));
    if (!(s == expected[i]))
      throw LoadError("checkpoint layer " + std::to_string(i) + " has unexpected shape");
    specs.push_back(s);
  }
  nn::Network net(specs);
  for (auto& l : net.layers()) {
    for (Eigen::Index r = 0; r < l.weight().rows(); ++r)
      for (Eigen::Index k = 0; k < l.weight().cols(); ++k) l.weight()(r, k) = detail::get_f32(in, path);
    for (Eigen::Index k = 0; k < l.bias().size(); ++k) l.bias()(k) = detail::get_f32(in, path);
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw LoadError("trailing bytes after checkpoint parameters: " + path);
  try {
    return ToyDetector(cfg, std::move(net));
  } catch (const ContractError& e) {
    throw LoadError(std::string("invalid checkpoint: ") + e.what());
  }
}

}  // namespace tpa
