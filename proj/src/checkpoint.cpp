#include "rtal/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "rtal/errors.hpp"
#include "rtal/model.hpp"

namespace rtal {
namespace {

template <class U>
void put(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return value;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    const std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return &p.tensor;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out;
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, ckpt.config_digest);
  put<std::uint64_t>(out, ckpt.step);
  for (const auto& [name, tensor] : ckpt.params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t e : tensor.shape()) put<std::uint64_t>(out, e);
    for (double v : tensor.to_vector()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.config_digest = in.get<std::uint64_t>("config digest");
  ckpt.step = in.get<std::uint64_t>("step");
  while (!in.done()) {
    const auto name_len = in.get<std::uint32_t>("name length");
    std::string name(in.take(name_len, "name"));
    const auto rank = in.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& e : shape) {
      e = static_cast<std::size_t>(in.get<std::uint64_t>("extent"));
      if (e == 0) throw FormatError("checkpoint record '" + name + "' has a zero extent");
    }
    Tensor t(shape, DType::F32);
    for (float& v : t.mutable_values<float>()) v = std::bit_cast<float>(in.get<std::uint32_t>("payload"));
    ckpt.params.push_back({std::move(name), t});
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    const std::string bytes = encode_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

Checkpoint snapshot(const ParamList& params, std::uint64_t step, std::uint64_t config_digest) {
  Checkpoint c;
  c.step = step;
  c.config_digest = config_digest;
  for (const auto& p : params) c.params.push_back({p.name, p.tensor.to(DType::F32)});
  return c;
}

Checkpoint snapshot(const Seq2SeqModel& model, std::uint64_t step) {
  return snapshot(model.parameters(), step, model.config().digest());
}

void load_params(const ParamList& params, const Checkpoint& ckpt) {
  if (params.size() != ckpt.params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.params.size()) + " tensors, expected " +
                      std::to_string(params.size()));
  }
  for (const auto& p : params) {
    const Tensor* src = ckpt.find(p.name);
    if (src == nullptr) throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    if (src->shape() != p.tensor.shape()) {
      throw FormatError("parameter '" + p.name + "' has shape " + to_string(src->shape()) + " in checkpoint, expected " +
                        to_string(p.tensor.shape()));
    }
  }
  for (const auto& p : params) {
    const auto values = ckpt.find(p.name)->values<float>();
    Tensor dst = p.tensor;
    visit_dtype(dst.dtype(), [&]<class T>() {
      auto out = dst.mutable_values<T>();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(values[i]);
    });
  }
}

void load_model(Seq2SeqModel& model, const Checkpoint& ckpt) {
  if (ckpt.config_digest != model.config().digest()) {
    throw FormatError("checkpoint config digest does not match the model configuration");
  }
  load_params(model.parameters(), ckpt);
}

Checkpoint average_checkpoints(std::span<const Checkpoint> checkpoints) {
  if (checkpoints.empty()) throw std::invalid_argument("average_checkpoints: no checkpoints given");
  const Checkpoint& first = checkpoints.front();
  for (const Checkpoint& c : checkpoints) {
    if (c.params.size() != first.params.size()) throw FormatError("average_checkpoints: parameter sets differ");
    for (std::size_t i = 0; i < first.params.size(); ++i) {
      const Tensor* t = c.find(first.params[i].name);
      if (t == nullptr) throw FormatError("average_checkpoints: parameter '" + first.params[i].name + "' missing");
      if (t->shape() != first.params[i].tensor.shape()) {
        throw FormatError("average_checkpoints: parameter '" + first.params[i].name + "' differs in shape");
      }
    }
  }
  Checkpoint avg;
  avg.config_digest = first.config_digest;
  for (const Checkpoint& c : checkpoints) avg.step = std::max(avg.step, c.step);
  const std::size_t k = checkpoints.size();
  std::vector<float> column(k);
  for (const auto& [name, proto] : first.params) {
    std::vector<std::span<const float>> sources;
    for (const Checkpoint& c : checkpoints) sources.push_back(c.find(name)->values<float>());
    Tensor out(proto.shape(), DType::F32);
    auto dst = out.mutable_values<float>();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      for (std::size_t j = 0; j < k; ++j) column[j] = sources[j][i];
      std::sort(column.begin(), column.end());
      double acc = 0;
      for (float v : column) acc += v;
      dst[i] = static_cast<float>(acc / static_cast<double>(k));
    }
    avg.params.push_back({name, out});
  }
  return avg;
}

}  // namespace rtal
