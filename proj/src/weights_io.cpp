#include "looplens/weights_io.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <functional>
#include <vector>

namespace looplens {

namespace {

using nlohmann::json;

struct TensorRef {
  std::string name;
  const MatrixXd* matrix = nullptr;
  const VectorXd* vector = nullptr;

  Eigen::Index count() const { return matrix ? matrix->size() : vector->size(); }
};

std::vector<TensorRef> enumerate(const ModelWeights& w) {
  std::vector<TensorRef> out;
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& l = w.layers[i];
    const std::string base = "layers." + std::to_string(i) + ".";
    out.push_back({base + "wq", &l.wq, nullptr});
    out.push_back({base + "wk", &l.wk, nullptr});
    out.push_back({base + "wv", &l.wv, nullptr});
    out.push_back({base + "wo", &l.wo, nullptr});
    out.push_back({base + "mlp_in", &l.mlp_in, nullptr});
    out.push_back({base + "mlp_out", &l.mlp_out, nullptr});
    out.push_back({base + "gain1", nullptr, &l.gain1});
    out.push_back({base + "gain2", nullptr, &l.gain2});
    out.push_back({base + "gain3", nullptr, &l.gain3});
    out.push_back({base + "gain4", nullptr, &l.gain4});
  }
  if (w.w_inject) out.push_back({"w_inject", &*w.w_inject, nullptr});
  out.push_back({"loop_norm_gain", nullptr, &w.loop_norm_gain});
  if (w.embedding) out.push_back({"embedding", &*w.embedding, nullptr});
  return out;
}

json config_to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"d_head", c.d_head},
              {"prelude_layers", c.prelude_layers},
              {"recurrent_layers", c.recurrent_layers},
              {"coda_layers", c.coda_layers},
              {"norm_scheme", to_string(c.norm_scheme)},
              {"norm_kind", to_string(c.norm_kind)},
              {"input_injection", c.input_injection},
              {"injection_sigma", c.injection_sigma},
              {"positional", to_string(c.positional)},
              {"mlp_hidden", c.mlp_hidden},
              {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.prelude_layers = j.at("prelude_layers").get<int>();
  c.recurrent_layers = j.at("recurrent_layers").get<int>();
  c.coda_layers = j.at("coda_layers").get<int>();
  c.norm_scheme = norm_scheme_from_string(j.at("norm_scheme").get<std::string>());
  c.norm_kind = norm_kind_from_string(j.at("norm_kind").get<std::string>());
  c.input_injection = j.at("input_injection").get<bool>();
  c.injection_sigma = j.at("injection_sigma").get<double>();
  c.positional = positional_from_string(j.at("positional").get<std::string>());
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void append_f32_row_major(std::vector<char>& payload, const TensorRef& t) {
  auto push = [&payload](double v) {
    const float f = static_cast<float>(v);
    char buf[4];
    std::memcpy(buf, &f, 4);
    payload.insert(payload.end(), buf, buf + 4);
  };
  if (t.matrix) {
    for (Eigen::Index r = 0; r < t.matrix->rows(); ++r)
      for (Eigen::Index c = 0; c < t.matrix->cols(); ++c) push((*t.matrix)(r, c));
  } else {
    for (Eigen::Index i = 0; i < t.vector->size(); ++i) push((*t.vector)(i));
  }
}

void write_u64_le(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, 8);
}

std::uint64_t read_u64_le(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw std::runtime_error("weight file: truncated header length");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void save_weights(const ModelWeights& weights, const std::string& path) {
  const auto tensors = enumerate(weights);
  json index = json::object();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    json shape = t.matrix ? json::array({t.matrix->rows(), t.matrix->cols()})
                          : json::array({t.vector->size()});
    index[t.name] = json{{"dtype", "f32"}, {"offset", offset}, {"shape", shape}};
    offset += static_cast<std::uint64_t>(t.count()) * 4;
  }
  json header{{"version", 1},
              {"config", config_to_json(weights.config)},
              {"rotary_base", weights.rotary_base},
              {"tensors", index}};
  std::string header_str = header.dump();
  header_str.push_back('\n');

  std::vector<char> payload;
  payload.reserve(offset);
  for (const auto& t : tensors) append_f32_row_major(payload, t);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("weight file: cannot open for writing: " + path);
  write_u64_le(os, header_str.size());
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw std::runtime_error("weight file: write failed: " + path);
}

namespace {

json read_header(std::istream& is, const std::string& path) {
  const std::uint64_t header_len = read_u64_le(is);
  std::string header(header_len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw std::runtime_error("weight file: truncated header: " + path);
  if (header.empty() || header.back() != '\n')
    throw std::runtime_error("weight file: header not newline-terminated: " + path);
  return json::parse(header);
}

}  // namespace

ModelWeights load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("weight file: cannot open: " + path);
  const json header = read_header(is, path);
  if (header.at("version").get<int>() != 1)
    throw std::runtime_error("weight file: unsupported version in " + path);

  std::vector<char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const json& index = header.at("tensors");

  auto read_tensor = [&](const std::string& name, Eigen::Index& rows, Eigen::Index& cols,
                         std::vector<double>& out, bool& is_vector) {
    const json& entry = index.at(name);
    if (entry.at("dtype").get<std::string>() != "f32")
      throw std::runtime_error("weight file: unsupported dtype for " + name);
    const auto& shape = entry.at("shape");
    is_vector = shape.size() == 1;
    rows = is_vector ? 1 : shape[0].get<Eigen::Index>();
    cols = is_vector ? shape[0].get<Eigen::Index>() : shape[1].get<Eigen::Index>();
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    const std::uint64_t count = static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols);
    if (off + count * 4 > payload.size())
      throw std::runtime_error("weight file: tensor " + name + " extends past payload");
    out.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, payload.data() + off + i * 4, 4);
      out[i] = static_cast<double>(f);
    }
  };

  auto load_matrix = [&](const std::string& name) {
    Eigen::Index rows, cols;
    std::vector<double> vals;
    bool is_vector;
    read_tensor(name, rows, cols, vals, is_vector);
    MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = vals[static_cast<std::size_t>(r * cols + c)];
    return m;
  };
  auto load_vector = [&](const std::string& name) {
    Eigen::Index rows, cols;
    std::vector<double> vals;
    bool is_vector;
    read_tensor(name, rows, cols, vals, is_vector);
    return VectorXd(Eigen::Map<const VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size())));
  };

  ModelWeights w;
  w.config = config_from_json(header.at("config"));
  w.config.validate();
  w.rotary_base = header.at("rotary_base").get<double>();
  w.layers.resize(static_cast<std::size_t>(w.config.total_layers()));
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const std::string base = "layers." + std::to_string(i) + ".";
    auto& l = w.layers[i];
    l.wq = load_matrix(base + "wq");
    l.wk = load_matrix(base + "wk");
    l.wv = load_matrix(base + "wv");
    l.wo = load_matrix(base + "wo");
    l.mlp_in = load_matrix(base + "mlp_in");
    l.mlp_out = load_matrix(base + "mlp_out");
    l.gain1 = load_vector(base + "gain1");
    l.gain2 = load_vector(base + "gain2");
    l.gain3 = load_vector(base + "gain3");
    l.gain4 = load_vector(base + "gain4");
  }
  if (w.config.input_injection) w.w_inject = load_matrix("w_inject");
  w.loop_norm_gain = load_vector("loop_norm_gain");
  if (index.contains("embedding")) w.embedding = load_matrix("embedding");
  return w;
}

std::string inspect_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("weight file: cannot open: " + path);
  return read_header(is, path).dump(2);
}

}  // namespace looplens
