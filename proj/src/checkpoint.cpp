#include "cmf/checkpoint.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cmf/error.hpp"

namespace cmf::checkpoint {

namespace {

constexpr const char* kMagic = "cmf-checkpoint";
constexpr int kVersion = 1;

std::string hex(double v) {
  std::ostringstream s;
  s << std::hexfloat << v;
  return s.str();
}

void write_widths(std::ostream& out, const std::vector<int>& w) {
  out << ' ' << w.size();
  for (int v : w) out << ' ' << v;
}

void write_flow(std::ostream& out, const char* name, const flownet::FlowModule& flow) {
  out << "flow " << name << " dim " << flow.dim() << " layers " << flow.layers().size() << '\n';
  for (const auto& layer : flow.layers()) {
    if (const auto* c = std::get_if<flownet::AffineCoupling>(&layer)) {
      out << "coupling mask ";
      for (bool b : c->mask) out << (b ? '1' : '0');
      out << " clamp " << hex(c->scale_clamp) << " scale";
      write_widths(out, c->scale_net.widths);
      out << " shift";
      write_widths(out, c->shift_net.widths);
      out << '\n';
    } else {
      const auto& p = std::get<flownet::Permutation>(layer);
      out << "permutation";
      for (int v : p.perm) out << ' ' << v;
      out << '\n';
    }
  }
  out << "params " << flow.param_count() << '\n';
  for (double v : flow.params()) out << hex(v) << '\n';
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::string word() {
    std::string w;
    if (!(in_ >> w)) fail("unexpected end of file");
    return w;
  }
  void expect(const std::string& token) {
    const std::string w = word();
    if (w != token) fail("expected '" + token + "', found '" + w + "'");
  }
  long integer() {
    const std::string w = word();
    char* end = nullptr;
    const long v = std::strtol(w.c_str(), &end, 10);
    if (end != w.c_str() + w.size()) fail("expected an integer, found '" + w + "'");
    return v;
  }
  double real() {
    const std::string w = word();
    char* end = nullptr;
    const double v = std::strtod(w.c_str(), &end);
    if (end != w.c_str() + w.size()) fail("expected a number, found '" + w + "'");
    return v;
  }
  std::vector<int> widths() {
    const long n = integer();
    if (n < 2 || n > 64) fail("bad width count");
    std::vector<int> w(n);
    for (auto& v : w) v = static_cast<int>(integer());
    return w;
  }
  [[noreturn]] void fail(const std::string& msg) { throw Error(ErrorCode::Parse, "checkpoint: " + msg); }

 private:
  std::istream& in_;
};

flownet::FlowModule read_flow(Reader& r, const char* name) {
  r.expect("flow");
  r.expect(name);
  r.expect("dim");
  const int dim = static_cast<int>(r.integer());
  r.expect("layers");
  const long count = r.integer();
  if (dim < 1 || count < 0) r.fail("bad flow header");
  std::vector<flownet::Layer> layers;
  for (long i = 0; i < count; ++i) {
    const std::string kind = r.word();
    if (kind == "coupling") {
      flownet::AffineCoupling c;
      r.expect("mask");
      const std::string mask = r.word();
      for (char ch : mask) {
        if (ch != '0' && ch != '1') r.fail("bad mask '" + mask + "'");
        c.mask.push_back(ch == '1');
      }
      r.expect("clamp");
      c.scale_clamp = r.real();
      r.expect("scale");
      c.scale_net.widths = r.widths();
      r.expect("shift");
      c.shift_net.widths = r.widths();
      layers.emplace_back(std::move(c));
    } else if (kind == "permutation") {
      flownet::Permutation p;
      for (int j = 0; j < dim; ++j) p.perm.push_back(static_cast<int>(r.integer()));
      layers.emplace_back(std::move(p));
    } else {
      r.fail("unknown layer kind '" + kind + "'");
    }
  }
  auto flow = flownet::FlowModule::from_layers(dim, std::move(layers));
  r.expect("params");
  const long n = r.integer();
  if (n != static_cast<long>(flow.param_count())) r.fail("parameter count does not match the layers");
  std::vector<double> p(n);
  for (auto& v : p) v = r.real();
  flow.set_params(p);
  return flow;
}

}  // namespace

void write(std::ostream& out, const Checkpoint& ck) {
  out << kMagic << ' ' << kVersion << '\n';
  out << "latent_dim " << ck.model.latent_dim() << '\n';
  out << "data_dim " << ck.model.data_dim() << '\n';
  out << "seed " << ck.seed << '\n';
  out << "epoch " << ck.epoch << '\n';
  write_flow(out, "h", ck.model.h());
  write_flow(out, "f", ck.model.f());
  out << "end\n";
}

Checkpoint read(std::istream& in) {
  Reader r(in);
  r.expect(kMagic);
  if (r.integer() != kVersion) r.fail("unsupported version");
  r.expect("latent_dim");
  const int d = static_cast<int>(r.integer());
  r.expect("data_dim");
  const int D = static_cast<int>(r.integer());
  Checkpoint ck;
  r.expect("seed");
  const std::string seed = r.word();
  ck.seed = std::strtoull(seed.c_str(), nullptr, 10);
  r.expect("epoch");
  ck.epoch = static_cast<int>(r.integer());
  auto h = read_flow(r, "h");
  auto f = read_flow(r, "f");
  r.expect("end");
  if (h.dim() != d || f.dim() != D) r.fail("flow dimensions do not match the header");
  ck.model = injective::InjectiveFlow(d, std::move(h), std::move(f));
  return ck;
}

void save(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  write(out, ck);
  if (!out) throw Error(ErrorCode::Io, "write failed: " + path);
}

Checkpoint load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  return read(in);
}

}  // namespace cmf::checkpoint
