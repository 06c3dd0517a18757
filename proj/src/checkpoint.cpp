#include "taskdiff/checkpoint.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "taskdiff/tasks.hpp"

namespace td {
namespace {

constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& data;
  size_t pos = 0;

  void need(size_t n, const char* what) {
    TD_CHECK(pos + n <= data.size(), "bad_data",
             std::string("checkpoint: truncated while reading ") + what);
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(data[pos++])) << (8 * i);
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(data[pos++])) << (8 * i);
    return v;
  }
  std::string str(size_t n, const char* what) {
    need(n, what);
    std::string s = data.substr(pos, n);
    pos += n;
    return s;
  }
};

uint32_t crc_of(const std::string& bytes, size_t from, size_t to) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + from),
              static_cast<uInt>(to - from));
  return static_cast<uint32_t>(crc);
}

std::string section_names(const std::vector<std::string>& names) {
  std::string joined;
  for (size_t i = 0; i < names.size(); ++i) {
    if (i) joined.push_back('\n');
    joined += names[i];
  }
  return joined;
}

std::vector<std::string> split_names(const std::string& joined) {
  std::vector<std::string> out;
  std::stringstream ss(joined);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

const Tensor& entry(const NamedTensors& e, const std::string& name) {
  auto it = e.find(name);
  TD_CHECK(it != e.end(), "bad_data", "checkpoint: missing entry '" + name + "'");
  return it->second;
}

int entry_int(const NamedTensors& e, const std::string& name) {
  const Tensor& t = entry(e, name);
  TD_CHECK(t.v.size() == 1, "bad_data", "checkpoint: '" + name + "' is not a scalar");
  return static_cast<int>(t.v[0]);
}

std::vector<int> entry_ints(const NamedTensors& e, const std::string& name) {
  const Tensor& t = entry(e, name);
  std::vector<int> out;
  for (float x : t.v) out.push_back(static_cast<int>(x));
  return out;
}

Tensor int_tensor(const std::vector<int>& xs) {
  Tensor t = Tensor::zeros({static_cast<int>(xs.size())});
  for (size_t i = 0; i < xs.size(); ++i) t.v[i] = static_cast<float>(xs[i]);
  return t;
}

}  // namespace

Tensor bytes_to_tensor(const std::string& bytes) {
  Tensor t = Tensor::zeros({static_cast<int>(bytes.size())});
  for (size_t i = 0; i < bytes.size(); ++i)
    t.v[i] = static_cast<float>(static_cast<unsigned char>(bytes[i]));
  return t;
}

std::string tensor_to_bytes(const Tensor& t) {
  std::string out;
  out.reserve(t.v.size());
  for (float x : t.v) {
    TD_CHECK(x >= 0.0f && x <= 255.0f && x == std::floor(x), "bad_data",
             "checkpoint: byte tensor entry out of range");
    out.push_back(static_cast<char>(static_cast<unsigned char>(x)));
  }
  return out;
}

Tensor u64_to_tensor(uint64_t value) {
  std::string bytes;
  put_u64(bytes, value);
  return bytes_to_tensor(bytes);
}

uint64_t tensor_to_u64(const Tensor& t) {
  std::string bytes = tensor_to_bytes(t);
  TD_CHECK(bytes.size() == 8, "bad_data", "checkpoint: u64 entry must hold 8 bytes");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[static_cast<size_t>(i)]))
         << (8 * i);
  return v;
}

Tensor f64_to_tensor(double value) {
  uint64_t bits;
  static_assert(sizeof(bits) == sizeof(value));
  std::memcpy(&bits, &value, sizeof(bits));
  return u64_to_tensor(bits);
}

double tensor_to_f64(const Tensor& t) {
  uint64_t bits = tensor_to_u64(t);
  double value;
  std::memcpy(&value, &bits, sizeof(value));
  return value;
}

void save_checkpoint(const std::string& path, const NamedTensors& entries) {
  std::string out = "TDF1";
  put_u32(out, kVersion);
  size_t body_start = out.size();
  put_u32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape) put_u64(out, static_cast<uint64_t>(d));
    size_t bytes = t.v.size() * sizeof(float);
    size_t at = out.size();
    out.resize(at + bytes);
    if (bytes) std::memcpy(out.data() + at, t.v.data(), bytes);
  }
  put_u32(out, crc_of(out, body_start, out.size()));

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    TD_CHECK(f.good(), "io_error", "checkpoint: cannot open " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    TD_CHECK(f.good(), "io_error", "checkpoint: write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  TD_CHECK(!ec, "io_error", "checkpoint: rename failed for " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  TD_CHECK(f.good(), "io_error", "checkpoint: cannot open " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  std::string data = buf.str();

  TD_CHECK(data.size() >= 12, "bad_data", "checkpoint: file too small");
  TD_CHECK(data.compare(0, 4, "TDF1") == 0, "bad_data", "checkpoint: bad magic");

  Reader r{data, 4};
  uint32_t version = r.u32("version");
  TD_CHECK(version == kVersion, "bad_data",
           "checkpoint: unsupported version " + std::to_string(version));

  size_t body_start = r.pos;
  Reader tail{data, data.size() - 4};
  uint32_t stored_crc = tail.u32("crc");
  TD_CHECK(crc_of(data, body_start, data.size() - 4) == stored_crc, "bad_data",
           "checkpoint: CRC mismatch");

  NamedTensors out;
  uint32_t count = r.u32("entry count");
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = r.u32("name length");
    std::string name = r.str(name_len, "name");
    uint32_t rank = r.u32("rank");
    TD_CHECK(rank <= 8, "bad_data", "checkpoint: absurd rank for '" + name + "'");
    std::vector<int> shape;
    int64_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      uint64_t dim = r.u64("dim");
      TD_CHECK(dim <= (1ull << 31), "bad_data", "checkpoint: absurd dim");
      shape.push_back(static_cast<int>(dim));
      n *= static_cast<int64_t>(dim);
    }
    Tensor t;
    t.shape = std::move(shape);
    t.v.resize(static_cast<size_t>(n));
    r.need(static_cast<size_t>(n) * sizeof(float), "payload");
    if (n) std::memcpy(t.v.data(), data.data() + r.pos, t.v.size() * sizeof(float));
    r.pos += t.v.size() * sizeof(float);
    TD_CHECK(!out.count(name), "bad_data", "checkpoint: duplicate entry '" + name + "'");
    out[name] = std::move(t);
  }
  TD_CHECK(r.pos == data.size() - 4, "bad_data", "checkpoint: trailing bytes");
  return out;
}

NamedTensors pack_model(const ModelBundle& m) {
  NamedTensors e;
  for (const auto& [name, t] : m.params) e["denoiser/" + name] = t;

  e["table/rows"] = m.table.rows;
  e["table/names"] = bytes_to_tensor(section_names(m.table.names));
  e["table/init_seed"] = u64_to_tensor(m.table.init_seed);
  e["table/d"] = Tensor::scalar(static_cast<float>(m.table.d));

  std::vector<std::string> registry;
  for (int i = 0; i < task_count(); ++i) registry.push_back(task_by_index(i).name);
  e["registry/names"] = bytes_to_tensor(section_names(registry));

  e["config/base_channels"] = Tensor::scalar(static_cast<float>(m.cfg.base_channels));
  e["config/channel_mults"] = int_tensor(m.cfg.channel_mults);
  e["config/attn_resolutions"] = int_tensor(m.cfg.attn_resolutions);
  e["config/d_model"] = Tensor::scalar(static_cast<float>(m.cfg.d_model));
  e["config/d_task"] = Tensor::scalar(static_cast<float>(m.cfg.d_task));
  e["config/text_vocab"] = Tensor::scalar(static_cast<float>(m.cfg.text_vocab));
  e["config/max_len"] = Tensor::scalar(static_cast<float>(m.cfg.max_len));
  e["config/param_kind"] =
      Tensor::scalar(m.cfg.param_kind == PredKind::v ? 1.0f : 0.0f);
  e["config/image_conditioned"] = Tensor::scalar(m.cfg.image_conditioned ? 1.0f : 0.0f);
  e["config/task_to_timestep"] = Tensor::scalar(m.cfg.task_to_timestep ? 1.0f : 0.0f);
  e["config/task_to_context"] = Tensor::scalar(m.cfg.task_to_context ? 1.0f : 0.0f);

  e["schedule/T"] = Tensor::scalar(static_cast<float>(m.schedule.T));
  e["schedule/beta_min"] = f64_to_tensor(m.schedule.beta_min);
  e["schedule/beta_max"] = f64_to_tensor(m.schedule.beta_max);
  e["schedule/zero_terminal"] = Tensor::scalar(m.schedule.zero_terminal ? 1.0f : 0.0f);

  if (m.predictor.w.v.size()) {
    e["predictor/w"] = m.predictor.w;
    e["predictor/b"] = m.predictor.b;
  }
  for (const auto& [name, t] : m.embedder) e["embedder/" + name] = t;
  return e;
}

ModelBundle unpack_model(const NamedTensors& e) {
  ModelBundle m;
  for (const auto& [name, t] : e)
    if (name.rfind("denoiser/", 0) == 0) m.params[name.substr(9)] = t;
    else if (name.rfind("embedder/", 0) == 0) m.embedder[name.substr(9)] = t;

  std::vector<std::string> registry = split_names(tensor_to_bytes(entry(e, "registry/names")));
  TD_CHECK(static_cast<int>(registry.size()) == task_count(), "bad_data",
           "checkpoint: registry size mismatch");
  for (int i = 0; i < task_count(); ++i)
    TD_CHECK(registry[static_cast<size_t>(i)] == task_by_index(i).name, "bad_data",
             "checkpoint: registry name mismatch at index " + std::to_string(i));

  m.table.rows = entry(e, "table/rows");
  m.table.names = split_names(tensor_to_bytes(entry(e, "table/names")));
  m.table.init_seed = tensor_to_u64(entry(e, "table/init_seed"));
  m.table.d = entry_int(e, "table/d");
  TD_CHECK(m.table.rows.rank() == 2 &&
               m.table.rows.dim(0) == static_cast<int>(m.table.names.size()) &&
               m.table.rows.dim(1) == m.table.d,
           "bad_data", "checkpoint: task table shape mismatch");

  m.cfg.base_channels = entry_int(e, "config/base_channels");
  m.cfg.channel_mults = entry_ints(e, "config/channel_mults");
  m.cfg.attn_resolutions = entry_ints(e, "config/attn_resolutions");
  m.cfg.d_model = entry_int(e, "config/d_model");
  m.cfg.d_task = entry_int(e, "config/d_task");
  m.cfg.text_vocab = entry_int(e, "config/text_vocab");
  m.cfg.max_len = entry_int(e, "config/max_len");
  m.cfg.param_kind = entry_int(e, "config/param_kind") ? PredKind::v : PredKind::epsilon;
  m.cfg.image_conditioned = entry_int(e, "config/image_conditioned") != 0;
  m.cfg.task_to_timestep = entry_int(e, "config/task_to_timestep") != 0;
  m.cfg.task_to_context = entry_int(e, "config/task_to_context") != 0;
  validate_config(m.cfg);

  int T = entry_int(e, "schedule/T");
  m.schedule = make_linear_schedule(T, tensor_to_f64(entry(e, "schedule/beta_min")),
                                    tensor_to_f64(entry(e, "schedule/beta_max")));
  if (entry_int(e, "schedule/zero_terminal"))
    m.schedule = rescale_zero_terminal_snr(m.schedule);

  if (e.count("predictor/w")) {
    m.predictor.w = entry(e, "predictor/w");
    m.predictor.b = entry(e, "predictor/b");
  }
  return m;
}

void save_model(const std::string& path, const ModelBundle& m) {
  save_checkpoint(path, pack_model(m));
}

ModelBundle load_model(const std::string& path) {
  return unpack_model(load_checkpoint(path));
}

}  // namespace td
