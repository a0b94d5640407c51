#include "g2aps/train/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "g2aps/common/errors.hpp"

namespace g2aps::train {

std::uint64_t fnv1a64(const void* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

class Writer {
 public:
  template <typename T>
  void put(const T& v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    put<std::uint64_t>(s.size());
    buf_.append(s);
  }
  template <typename T>
  void vec(const std::vector<T>& v) {
    put<std::uint64_t>(v.size());
    bytes(v.data(), v.size() * sizeof(T));
  }
  void matrix(const Eigen::MatrixXd& m) {
    put<std::int64_t>(m.rows());
    put<std::int64_t>(m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(m(i, j));
    }
  }
  std::string& data() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& b, std::size_t end) : buf_(b), end_(end) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  std::vector<T> vec() {
    const auto n = get<std::uint64_t>();
    if (n > (end_ - pos_) / sizeof(T)) throw IntegrityError("checkpoint truncated");
    std::vector<T> v(n);
    std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
    return v;
  }
  Eigen::MatrixXd matrix() {
    const auto r = get<std::int64_t>(), c = get<std::int64_t>();
    if (r < 0 || c < 0 || static_cast<std::uint64_t>(r) * static_cast<std::uint64_t>(c) > (end_ - pos_) / 8) {
      throw IntegrityError("checkpoint truncated");
    }
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = get<double>();
    }
    return m;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw IntegrityError("checkpoint truncated");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

void write_oim(Writer& w, const loss::OimState& s) {
  w.put<double>(s.temperature());
  w.put<double>(s.momentum());
  w.put<std::int32_t>(s.cursor());
  w.put<std::int32_t>(s.occupancy());
  w.matrix(s.lut());
  w.matrix(s.queue_storage());
}

loss::OimState read_oim(Reader& r) {
  const double temperature = r.get<double>();
  const double momentum = r.get<double>();
  const auto cursor = r.get<std::int32_t>();
  const auto occupied = r.get<std::int32_t>();
  Eigen::MatrixXd lut = r.matrix();
  Eigen::MatrixXd queue = r.matrix();
  if (lut.cols() != queue.cols() && queue.rows() > 0) throw IntegrityError("checkpoint: OIM dims disagree");
  if (cursor < 0 || occupied < 0 || occupied > queue.rows() || (queue.rows() > 0 && cursor >= queue.rows())) {
    throw IntegrityError("checkpoint: OIM queue cursor out of range");
  }
  loss::OimState s(0, 0, static_cast<int>(std::max<Eigen::Index>(1, lut.cols())), temperature, momentum, 0);
  s.restore(std::move(lut), std::move(queue), cursor, occupied);
  return s;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.str(c.meta.dump());
  w.put<std::uint64_t>(c.parameters.size());
  for (const auto& p : c.parameters) {
    w.str(p.name);
    w.vec(p.shape);
    w.vec(p.values);
  }
  write_oim(w, c.oim_student);
  write_oim(w, c.oim_teacher);
  w.put<std::uint64_t>(c.momentum.size());
  for (const auto& m : c.momentum) w.vec(m);
  const std::uint64_t sum = fnv1a64(w.data().data(), w.data().size());
  w.put<std::uint64_t>(sum);
  return std::move(w.data());
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 8) throw IntegrityError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw IntegrityError("not a checkpoint file (bad magic)");
  }
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  if (fnv1a64(bytes.data(), body) != stored) throw IntegrityError("checkpoint checksum mismatch");

  Reader r(bytes, body);
  for (std::size_t i = 0; i < sizeof kCheckpointMagic; ++i) r.get<char>();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  try {
    c.meta = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw IntegrityError(std::string("checkpoint metadata: ") + e.what());
  }
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    NamedArray a;
    a.name = r.str();
    a.shape = r.vec<int>();
    a.values = r.vec<float>();
    c.parameters.push_back(std::move(a));
  }
  c.oim_student = read_oim(r);
  c.oim_teacher = read_oim(r);
  const auto m = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < m; ++i) c.momentum.push_back(r.vec<float>());
  if (r.pos() != body) throw IntegrityError("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize_checkpoint(c);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

std::vector<NamedArray> capture_parameters(const nn::ParameterList& params) {
  std::vector<NamedArray> out;
  for (const auto& p : params) {
    out.push_back({p.name, p.tensor.shape(), std::vector<float>(p.tensor.values().begin(), p.tensor.values().end())});
  }
  return out;
}

void restore_parameters(const std::vector<NamedArray>& saved, const nn::ParameterList& params) {
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& s : saved) by_name[s.name] = &s;
  for (const auto& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IntegrityError("checkpoint lacks parameter " + p.name);
    if (it->second->shape != p.tensor.shape()) throw IntegrityError("checkpoint shape mismatch for " + p.name);
    auto dst = p.tensor.node()->value.data();
    std::copy(it->second->values.begin(), it->second->values.end(), dst);
  }
}

}  // namespace g2aps::train
