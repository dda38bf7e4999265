#include "tiednet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <type_traits>

#include "tiednet/error.hpp"

namespace tiednet {

namespace {

constexpr char kMagic[4] = {'P', 'E', 'C', 'K'};
constexpr const char* kStateRecord = "train/state";
constexpr const char* kSlotPrefix = "optim/";

class Writer {
 public:
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void record(const std::string& name, const Tensor& t) {
    uint<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    bytes(name.data(), name.size());
    uint<std::uint8_t>(static_cast<std::uint8_t>(t.dtype()));
    uint<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.dims()) uint<std::uint64_t>(static_cast<std::uint64_t>(d));
    const Tensor c = t.contiguous();
    dispatch(c.dtype(), [&]<typename T>() {
      using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
      const T* data = c.data<T>();
      for (std::int64_t i = 0; i < c.numel(); ++i) {
        Bits bits;
        std::memcpy(&bits, &data[i], sizeof bits);
        uint<Bits>(bits);
      }
    });
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}
  void need(std::size_t n, const char* what) {
    if (n > buf.size() - pos) {
      throw IntegrityError(std::string("checkpoint truncated while reading ") +
                           what + " at byte " + std::to_string(pos));
    }
  }
  template <class U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<U>(buf[pos + i]) << (8 * i));
    }
    pos += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

std::vector<double> state_values(const TrainState& s) {
  const auto& o = s.opt;
  return {static_cast<double>(s.step),
          static_cast<double>(s.seed >> 32),
          static_cast<double>(s.seed & 0xffffffffull),
          static_cast<double>(o.kind),
          static_cast<double>(o.schedule),
          o.lr,
          static_cast<double>(o.total_steps),
          o.momentum,
          o.beta1,
          o.beta2,
          o.eps,
          o.weight_decay};
}

TrainState state_from(const Tensor& t, std::map<std::string, Tensor> slots) {
  const auto v = t.values();
  if (t.dtype() != DType::f64 || v.size() != 12) {
    throw FormatError("checkpoint: malformed train state record");
  }
  TrainState s;
  s.step = static_cast<std::int64_t>(v[0]);
  s.seed = (static_cast<std::uint64_t>(v[1]) << 32) | static_cast<std::uint64_t>(v[2]);
  if (v[3] != 0.0 && v[3] != 1.0) throw FormatError("checkpoint: unknown optimizer kind");
  if (v[4] != 0.0 && v[4] != 1.0) throw FormatError("checkpoint: unknown schedule kind");
  s.opt.kind = static_cast<OptimizerKind>(static_cast<int>(v[3]));
  s.opt.schedule = static_cast<ScheduleKind>(static_cast<int>(v[4]));
  s.opt.lr = v[5];
  s.opt.total_steps = static_cast<std::int64_t>(v[6]);
  s.opt.momentum = v[7];
  s.opt.beta1 = v[8];
  s.opt.beta2 = v[9];
  s.opt.eps = v[10];
  s.opt.weight_decay = v[11];
  s.slots = std::move(slots);
  return s;
}

// Validates `raw` against `model` and returns the pending copies plus the
// train state, without touching the model.
struct Plan {
  std::vector<std::pair<ParamPtr, const Tensor*>> copies;
  std::optional<TrainState> state;
};

Plan plan_restore(const Model& model, const RawCheckpoint& raw) {
  Plan plan;
  std::map<std::string, bool> seen;
  std::map<std::string, Tensor> slots;
  const Tensor* state_record = nullptr;
  for (const auto& rec : raw.records) {
    if (seen.count(rec.name)) {
      throw FormatError("checkpoint: duplicate record '" + rec.name + "'");
    }
    seen[rec.name] = true;
    if (rec.name == kStateRecord) {
      state_record = &rec.value;
      continue;
    }
    if (rec.name.rfind(kSlotPrefix, 0) == 0) {
      slots.emplace(rec.name.substr(std::strlen(kSlotPrefix)), rec.value);
      continue;
    }
    auto p = model.find(rec.name);
    if (!p) {
      throw ShapeError("checkpoint record '" + rec.name +
                       "' has no matching model parameter");
    }
    if (p->value.dims() != rec.value.dims() || p->value.dtype() != rec.value.dtype()) {
      throw ShapeError("checkpoint record '" + rec.name + "' is " +
                       shape_str(rec.value.dims()) + " " + dtype_name(rec.value.dtype()) +
                       ", model expects " + shape_str(p->value.dims()) + " " +
                       dtype_name(p->value.dtype()));
    }
    plan.copies.emplace_back(p, &rec.value);
  }
  for (const auto& p : model.parameters()) {
    if (!seen.count(p->name)) {
      throw IntegrityError("checkpoint is missing parameter '" + p->name + "'");
    }
  }
  if (state_record) {
    plan.state = state_from(*state_record, std::move(slots));
  } else if (!slots.empty()) {
    throw FormatError("checkpoint has optimizer slots but no train state");
  }
  return plan;
}

void apply(const Plan& plan) {
  for (const auto& [p, value] : plan.copies) {
    p->value.copy_from(*value);
    p->zero_grad();
  }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model,
                                            const TrainState* state) {
  const std::string config = config_to_json(model.config());
  std::size_t count = model.parameters().size();
  if (state) count += 1 + state->slots.size();

  Writer w;
  w.bytes(kMagic, 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint64_t>(count);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
  w.bytes(config.data(), config.size());
  for (const auto& p : model.parameters()) w.record(p->name, p->value);
  if (state) {
    const auto values = state_values(*state);
    w.record(kStateRecord,
             Tensor::from_values({static_cast<std::int64_t>(values.size())},
                                 values, DType::f64));
    for (const auto& [key, t] : state->slots) w.record(kSlotPrefix + key, t);
  }
  return std::move(w.out);
}

void save_checkpoint(const Model& model, const TrainState* state,
                     const std::string& path) {
  const auto bytes = encode_checkpoint(model, state);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

RawCheckpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 && std::memcmp(bytes.data(), kMagic, bytes.size()) == 0) {
    throw IntegrityError("checkpoint truncated inside the header");
  }
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a checkpoint: bad magic (expected \"PECK\")");
  }
  Reader r(bytes);
  r.pos = 4;
  RawCheckpoint raw;
  raw.version = r.uint<std::uint32_t>("version");
  if (raw.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(raw.version));
  }
  const auto count = r.uint<std::uint64_t>("record count");
  const auto config_len = r.uint<std::uint32_t>("config length");
  raw.config_json = r.str(config_len, "config");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.uint<std::uint32_t>("record name length");
    std::string name = r.str(name_len, "record name");
    const auto dtype_tag = r.uint<std::uint8_t>("record dtype");
    if (dtype_tag > 1) {
      throw FormatError("record '" + name + "': unknown dtype tag " +
                        std::to_string(dtype_tag));
    }
    const auto dtype = static_cast<DType>(dtype_tag);
    const auto ndim = r.uint<std::uint8_t>("record rank");
    Shape dims;
    std::uint64_t numel = 1;
    for (int a = 0; a < ndim; ++a) {
      const auto d = r.uint<std::uint64_t>("record dims");
      if (d == 0 || d > (1ull << 40)) {
        throw FormatError("record '" + name + "': invalid extent " + std::to_string(d));
      }
      numel *= d;
      if (numel > (1ull << 40)) throw FormatError("record '" + name + "' too large");
      dims.push_back(static_cast<std::int64_t>(d));
    }
    const std::size_t width = dtype == DType::f32 ? 4 : 8;
    r.need(numel * width, "record data");
    Tensor t(dims, dtype);
    dispatch(dtype, [&]<typename T>() {
      using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
      T* data = t.data<T>();
      for (std::uint64_t i = 0; i < numel; ++i) {
        const Bits bits = r.uint<Bits>("record data");
        std::memcpy(&data[i], &bits, sizeof bits);
      }
    });
    raw.records.push_back({std::move(name), std::move(t)});
  }
  if (r.pos != bytes.size()) {
    throw IntegrityError("checkpoint has " + std::to_string(bytes.size() - r.pos) +
                         " trailing bytes");
  }
  return raw;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  const RawCheckpoint raw = parse_checkpoint(bytes);
  ModelConfig cfg;
  try {
    cfg = parse_config(raw.config_json);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  Checkpoint ck;
  ck.model = build_model(cfg, 0);
  Plan plan = plan_restore(*ck.model, raw);
  apply(plan);
  ck.state = std::move(plan.state);
  return ck;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path));
}

std::optional<TrainState> load_into(Model& model, const std::string& path) {
  const RawCheckpoint raw = parse_checkpoint(read_file(path));
  ModelConfig stored;
  try {
    stored = parse_config(raw.config_json);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  if (config_to_json(stored) != config_to_json(model.config())) {
    throw ShapeError("checkpoint config " + config_to_json(stored) +
                     " does not match model config " +
                     config_to_json(model.config()));
  }
  Plan plan = plan_restore(model, raw);
  apply(plan);
  return std::move(plan.state);
}

}  // namespace tiednet
