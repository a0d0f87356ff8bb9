#include "minutiae/nn/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace minutiae::nn {
namespace {

constexpr char kMagic[8] = {'M', 'N', 'T', 'C', 'K', 'P', 'T', '\x1a'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated data");
  }
  const std::string& bytes_;
  size_t pos_ = 0;
};

std::string encode_meta(const std::map<std::string, std::string>& meta) {
  std::string out;
  for (const auto& [k, v] : meta) out += k + "=" + v + "\n";
  return out;
}

std::map<std::string, std::string> decode_meta(const std::string& text) {
  std::map<std::string, std::string> meta;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: malformed metadata line");
    meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return meta;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::runtime_error("checkpoint: bad number " + s);
  return v;
}

const std::string& meta_at(const Checkpoint& ckpt, const std::string& key) {
  auto it = ckpt.meta.find(key);
  if (it == ckpt.meta.end()) throw std::runtime_error("checkpoint: missing metadata key " + key);
  return it->second;
}

bool operator==(const Checkpoint& a, const Checkpoint& b) {
  if (a.model != b.model || a.meta != b.meta || a.manifest.size() != b.manifest.size() ||
      a.tensors.size() != b.tensors.size()) {
    return false;
  }
  for (size_t i = 0; i < a.manifest.size(); ++i) {
    if (a.manifest[i].kind != b.manifest[i].kind || a.manifest[i].shapes != b.manifest[i].shapes) return false;
  }
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    if (!a.tensors[i].same_shape(b.tensors[i])) return false;
    if (std::memcmp(a.tensors[i].data(), b.tensors[i].data(), sizeof(float) * a.tensors[i].size()) != 0) return false;
  }
  return true;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put_u32(out, Checkpoint::kVersion);
  put_string(out, ckpt.model);
  put_string(out, encode_meta(ckpt.meta));
  put_u32(out, static_cast<std::uint32_t>(ckpt.manifest.size()));
  size_t expected = 0;
  for (const CheckpointEntry& e : ckpt.manifest) {
    out.push_back(static_cast<char>(e.kind));
    put_u32(out, static_cast<std::uint32_t>(e.shapes.size()));
    for (const auto& s : e.shapes) {
      for (int d : s) put_u32(out, static_cast<std::uint32_t>(d));
    }
    expected += e.shapes.size();
  }
  if (expected != ckpt.tensors.size()) throw std::logic_error("checkpoint: manifest does not match tensor list");
  for (const Tensor<float>& t : ckpt.tensors) {
    for (Eigen::Index i = 0; i < t.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(t.data()[i]));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.raw(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw std::runtime_error("checkpoint: bad magic bytes");
  }
  const std::uint32_t version = in.u32();
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.model = in.str();
  ckpt.meta = decode_meta(in.str());
  const std::uint32_t entries = in.u32();
  std::vector<std::array<int, 4>> shapes;
  for (std::uint32_t i = 0; i < entries; ++i) {
    CheckpointEntry e;
    e.kind = in.u8();
    const std::uint32_t count = in.u32();
    for (std::uint32_t j = 0; j < count; ++j) {
      std::array<int, 4> s{};
      for (int& d : s) d = static_cast<int>(in.u32());
      e.shapes.push_back(s);
      shapes.push_back(s);
    }
    ckpt.manifest.push_back(std::move(e));
  }
  for (const auto& s : shapes) {
    Tensor<float> t(s);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = in.f32();
    ckpt.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return decode_checkpoint(buf.str());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string(e.what()) + " (" + path.string() + ")");
  }
}

void capture_layers(Layer<float>& root, Checkpoint& ckpt) {
  for (Layer<float>* layer : stateful_layers(root)) {
    CheckpointEntry e;
    e.kind = static_cast<std::uint8_t>(layer->kind());
    for (Tensor<float>* t : layer->state()) {
      e.shapes.push_back(t->shape());
      ckpt.tensors.push_back(*t);
    }
    ckpt.manifest.push_back(std::move(e));
  }
}

size_t restore_layers(Layer<float>& root, const Checkpoint& ckpt, size_t first) {
  size_t tensor_index = 0;
  for (size_t i = 0; i < first && i < ckpt.manifest.size(); ++i) tensor_index += ckpt.manifest[i].shapes.size();
  size_t entry = first;
  for (Layer<float>* layer : stateful_layers(root)) {
    if (entry >= ckpt.manifest.size()) throw std::runtime_error("checkpoint: fewer layers than the model");
    const CheckpointEntry& e = ckpt.manifest[entry++];
    auto state = layer->state();
    if (e.kind != static_cast<std::uint8_t>(layer->kind()) || e.shapes.size() != state.size()) {
      throw std::runtime_error("checkpoint: layer manifest does not match the model");
    }
    for (size_t j = 0; j < state.size(); ++j) {
      if (e.shapes[j] != state[j]->shape()) throw std::runtime_error("checkpoint: tensor shape mismatch");
      *state[j] = ckpt.tensors[tensor_index++];
    }
  }
  return entry;
}

void capture_optimizer(const OptimState<float>& state, Checkpoint& ckpt) {
  ckpt.meta["optim.step"] = std::to_string(state.step);
  ckpt.meta["optim.momentum"] = format_double(state.momentum);
  ckpt.meta["optim.weight_decay"] = format_double(state.weight_decay);
  ckpt.meta["optim.initial_lr"] = format_double(state.schedule.initial_lr);
  ckpt.meta["optim.decay_fraction"] = format_double(state.schedule.decay_fraction);
  ckpt.meta["optim.decay_factor"] = format_double(state.schedule.decay_factor);
  ckpt.meta["optim.total_steps"] = std::to_string(state.schedule.total_steps);
  for (const Tensor<float>& v : state.velocity) {
    ckpt.manifest.push_back(CheckpointEntry{kMomentumEntry, {v.shape()}});
    ckpt.tensors.push_back(v);
  }
}

void restore_optimizer(const Checkpoint& ckpt, OptimState<float>& state) {
  state.step = std::stoll(meta_at(ckpt, "optim.step"));
  state.momentum = parse_double(meta_at(ckpt, "optim.momentum"));
  state.weight_decay = parse_double(meta_at(ckpt, "optim.weight_decay"));
  state.schedule.initial_lr = parse_double(meta_at(ckpt, "optim.initial_lr"));
  state.schedule.decay_fraction = parse_double(meta_at(ckpt, "optim.decay_fraction"));
  state.schedule.decay_factor = parse_double(meta_at(ckpt, "optim.decay_factor"));
  state.schedule.total_steps = std::stoll(meta_at(ckpt, "optim.total_steps"));
  state.velocity.clear();
  size_t tensor_index = 0;
  for (const CheckpointEntry& e : ckpt.manifest) {
    if (e.kind == kMomentumEntry) state.velocity.push_back(ckpt.tensors[tensor_index]);
    tensor_index += e.shapes.size();
  }
}

}  // namespace minutiae::nn
