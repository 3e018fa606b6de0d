#include "enclab/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "enclab/errors.hpp"

namespace enclab {

namespace {

constexpr char kMagic[8] = {'E', 'N', 'C', 'L', 'A', 'B', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

template <typename T>
void put(std::string& buf, T v) {
  put_bytes(buf, &v, sizeof(T));
}

void put_str(std::string& buf, const std::string& s) {
  put<std::uint64_t>(buf, s.size());
  buf.append(s);
}

void put_tensor(std::string& buf, const Tensor& t) {
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
  for (Index e : t.shape()) put<Index>(buf, e);
  const auto v = t.values();
  put_bytes(buf, v.data(), v.size() * sizeof(Scalar));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw DataError("checkpoint: truncated record");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string get_str() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
  Tensor get_tensor(bool requires_grad) {
    const auto rank = get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw DataError("checkpoint: bad tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = get<Index>();
    const Index n = shape_numel(shape);
    if (n <= 0) throw DataError("checkpoint: bad tensor shape");
    need(static_cast<std::size_t>(n) * sizeof(Scalar));
    std::vector<Scalar> data(static_cast<std::size_t>(n));
    std::memcpy(data.data(), buf.data() + pos, data.size() * sizeof(Scalar));
    pos += data.size() * sizeof(Scalar);
    return Tensor::from_values(std::move(shape), std::move(data),
                               requires_grad);
  }
};

}  // namespace

std::string objective_name(ObjectiveKind k) {
  return k == ObjectiveKind::mlm ? "mlm" : "rtd";
}

ObjectiveKind objective_from_name(const std::string& s) {
  if (s == "mlm") return ObjectiveKind::mlm;
  if (s == "rtd") return ObjectiveKind::rtd;
  throw ConfigError("unknown objective: " + s);
}

std::uint64_t checkpoint_spec_hash(const EncoderSpec& spec,
                                   ObjectiveKind objective) {
  return fnv1a64(objective_name(objective),
                 fnv1a64(spec_to_json(spec).dump()));
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string payload;
  put_str(payload, spec_to_json(ckpt.spec).dump());
  put<std::uint8_t>(payload, static_cast<std::uint8_t>(ckpt.objective));
  put<std::uint8_t>(payload, static_cast<std::uint8_t>(ckpt.phase));
  put<Index>(payload, ckpt.tokens_seen);
  put<std::uint64_t>(payload, ckpt.step);
  put<std::uint64_t>(payload, ckpt.run_seed);
  put_str(payload, ckpt.rng_blob);
  put<std::uint64_t>(payload, ckpt.params.size());
  for (const auto& [name, t] : ckpt.params) {
    put_str(payload, name);
    put_tensor(payload, t);
  }
  put<Index>(payload, ckpt.adam.t);
  put<std::uint64_t>(payload, ckpt.adam.m.size());
  for (const auto& [name, m] : ckpt.adam.m) {
    put_str(payload, name);
    put_tensor(payload, m);
    put_tensor(payload, ckpt.adam.v.at(name));
  }

  std::string out;
  out.reserve(payload.size() + 24);
  put_bytes(out, kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, fnv1a64(payload.data(), payload.size()));
  out += payload;

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("save_checkpoint: cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("save_checkpoint: short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path,
                           std::optional<std::uint64_t> expected_spec_hash) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("load_checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t))
    throw DataError("load_checkpoint: file too short: " + path);
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw DataError("load_checkpoint: bad magic in " + path);

  Reader r{buf, sizeof(kMagic)};
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion)
    throw DataError("load_checkpoint: version " + std::to_string(version) +
                    " unsupported (expected " + std::to_string(kVersion) + ")");
  const auto stored_hash = r.get<std::uint64_t>();
  const auto actual_hash =
      fnv1a64(buf.data() + r.pos, buf.size() - r.pos);
  if (stored_hash != actual_hash)
    throw DataError("load_checkpoint: payload hash mismatch in " + path +
                    " (stored " + std::to_string(stored_hash) + ", actual " +
                    std::to_string(actual_hash) + ")");

  Checkpoint ckpt;
  nlohmann::json spec_json;
  try {
    spec_json = nlohmann::json::parse(r.get_str());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("load_checkpoint: bad spec json: ") + e.what());
  }
  ckpt.spec = spec_from_json(spec_json);
  ckpt.objective = static_cast<ObjectiveKind>(r.get<std::uint8_t>());
  ckpt.phase = static_cast<Phase>(r.get<std::uint8_t>());
  ckpt.tokens_seen = r.get<Index>();
  ckpt.step = r.get<std::uint64_t>();
  ckpt.run_seed = r.get<std::uint64_t>();
  ckpt.rng_blob = r.get_str();
  const auto n_params = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_params; ++i) {
    std::string name = r.get_str();
    ckpt.params.emplace(std::move(name), r.get_tensor(/*requires_grad=*/true));
  }
  ckpt.adam.t = r.get<Index>();
  const auto n_moments = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_moments; ++i) {
    std::string name = r.get_str();
    Tensor m = r.get_tensor(false);
    Tensor v = r.get_tensor(false);
    ckpt.adam.m.emplace(name, std::move(m));
    ckpt.adam.v.emplace(std::move(name), std::move(v));
  }
  if (r.pos != buf.size())
    throw DataError("load_checkpoint: trailing bytes in " + path);

  if (expected_spec_hash) {
    const auto h = checkpoint_spec_hash(ckpt.spec, ckpt.objective);
    if (h != *expected_spec_hash)
      throw DataError("load_checkpoint: spec hash mismatch: file " +
                      std::to_string(h) + " vs expected " +
                      std::to_string(*expected_spec_hash));
  }
  return ckpt;
}

}  // namespace enclab
