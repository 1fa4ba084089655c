#include "plab/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace plab {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw std::runtime_error("checkpoint truncated");
  T value;
  std::memcpy(&value, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h) {
  for (std::uint8_t c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  return fnv1a64({reinterpret_cast<const std::uint8_t*>(data.data()), data.size()});
}

std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::vector<std::uint8_t> encode_checkpoint(const ModelState& model) {
  const std::size_t expected = ParamLayout(model.arch).total();
  if (model.params.size() != expected) {
    throw std::invalid_argument("checkpoint: parameter count does not match architecture");
  }
  const std::string text = model.arch.to_text();
  std::vector<std::uint8_t> out;
  out.reserve(kCheckpointMagic.size() + 4 + text.size() + 4 * model.params.size() + 8);
  out.insert(out.end(), kCheckpointMagic.begin(), kCheckpointMagic.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  const auto* p = reinterpret_cast<const std::uint8_t*>(model.params.data());
  out.insert(out.end(), p, p + 4 * model.params.size());
  put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

ModelState decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 12 ||
      std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  std::size_t pos = kCheckpointMagic.size();
  const auto len = get<std::uint32_t>(bytes, pos);
  if (pos + len > bytes.size()) throw std::runtime_error("checkpoint truncated");
  ModelState m;
  m.arch = ArchDescriptor::from_text(
      std::string_view(reinterpret_cast<const char*>(bytes.data() + pos), len));
  pos += len;
  const std::size_t n = ParamLayout(m.arch).total();
  if (pos + 4 * n + 8 != bytes.size()) throw std::runtime_error("checkpoint: size mismatch");
  m.params.resize(n);
  std::memcpy(m.params.data(), bytes.data() + pos, 4 * n);
  pos += 4 * n;
  const std::uint64_t stored = get<std::uint64_t>(bytes, pos);
  if (stored != fnv1a64(bytes.first(bytes.size() - 8))) {
    throw std::runtime_error("checkpoint: checksum mismatch");
  }
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& model) {
  const auto bytes = encode_checkpoint(model);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  return decode_checkpoint({reinterpret_cast<const std::uint8_t*>(data.data()), data.size()});
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string metrics_to_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["train_loss"] = r.train_loss;
  j["eval_loss"] = r.eval_loss;
  j["excess_risk"] = r.excess_risk;
  j["delta_z"] = r.delta_z;
  j["grad_norm"] = r.grad_norm;
  j["lr_now"] = r.lr_now;
  j["tokens_processed"] = r.tokens_processed;
  return j.dump();
}

MetricsRecord metrics_from_json_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  MetricsRecord r;
  r.step = j.at("step").get<std::int64_t>();
  r.train_loss = j.at("train_loss").get<double>();
  r.eval_loss = j.at("eval_loss").get<double>();
  r.excess_risk = j.at("excess_risk").get<double>();
  r.delta_z = j.at("delta_z").get<double>();
  r.grad_norm = j.at("grad_norm").get<double>();
  r.lr_now = j.at("lr_now").get<double>();
  r.tokens_processed = j.at("tokens_processed").get<std::int64_t>();
  return r;
}

MetricsStream read_metrics(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  MetricsStream out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(metrics_from_json_line(line));
  }
  return out;
}

}  // namespace plab

namespace plab {

void write_manifest(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> rel;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string r = fs::relative(e.path(), dir).generic_string();
    if (r == "manifest.json" || r.ends_with(".tmp")) continue;
    rel.push_back(r);
  }
  std::sort(rel.begin(), rel.end());
  nlohmann::ordered_json j;
  j["artifacts"] = nlohmann::ordered_json::array();
  for (const auto& r : rel) {
    j["artifacts"].push_back({{"path", r},
                              {"bytes", fs::file_size(dir / r)},
                              {"fnv1a64", hex64(file_checksum(dir / r))}});
  }
  write_file_atomic(dir / "manifest.json", j.dump(1) + "\n");
}

std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(read_file(dir / "manifest.json"));
  std::vector<std::string> bad;
  for (const auto& a : j.at("artifacts")) {
    const std::string r = a.at("path").get<std::string>();
    if (!std::filesystem::exists(dir / r) || hex64(file_checksum(dir / r)) != a.at("fnv1a64").get<std::string>()) {
      bad.push_back(r);
    }
  }
  return bad;
}

}  // namespace plab
