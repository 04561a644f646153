#include "temporl/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace temporl::net {

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw CheckpointError("checkpoint: truncated record header");
  return v;
}

}  // namespace

void save_params(const ParamSet& params, const nlohmann::json& spec, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot open for writing: " + path);

  nlohmann::json header;
  header["spec"] = spec;
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : params.items)
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});

  os << kParamsMagic << "\n" << header.dump() << "\n";
  for (const auto& [name, t] : params.items) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(t.rows()));
    write_u32(os, static_cast<std::uint32_t>(t.cols()));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw CheckpointError("checkpoint: write failed: " + path);
}

LoadedParams load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open: " + path);

  std::string magic;
  if (!std::getline(is, magic) || magic != kParamsMagic)
    throw CheckpointError("checkpoint: bad or missing magic line in " + path);
  std::string header_line;
  if (!std::getline(is, header_line))
    throw CheckpointError("checkpoint: missing header line in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: header parse error: ") + e.what());
  }

  LoadedParams out;
  out.spec = header.value("spec", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::uint32_t name_len = read_u32(is);
    std::string rec_name(name_len, '\0');
    is.read(rec_name.data(), name_len);
    const std::uint32_t rows = read_u32(is);
    const std::uint32_t cols = read_u32(is);
    if (rec_name != name || static_cast<int>(rows) != entry.at("rows").get<int>() ||
        static_cast<int>(cols) != entry.at("cols").get<int>())
      throw CheckpointError("checkpoint: record/header mismatch at tensor " + name);
    diff::Tensor t(static_cast<int>(rows), static_cast<int>(cols));
    is.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw CheckpointError("checkpoint: truncated tensor data for " + name);
    out.tensors.emplace_back(name, std::move(t));
  }
  return out;
}

const diff::Tensor& LoadedParams::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw CheckpointError("checkpoint: tensor not found: " + name);
}

void restore_into(const LoadedParams& loaded, ParamSet& params) {
  if (loaded.tensors.size() != params.items.size())
    throw CheckpointError("checkpoint: tensor count mismatch on restore");
  for (std::size_t k = 0; k < params.items.size(); ++k) {
    const auto& [lname, lt] = loaded.tensors[k];
    auto& [pname, pt] = params.items[k];
    if (lname != pname || lt.rows() != pt.rows() || lt.cols() != pt.cols())
      throw CheckpointError("checkpoint: spec mismatch at " + pname);
    pt.data() = lt.data();
  }
}

}  // namespace temporl::net
