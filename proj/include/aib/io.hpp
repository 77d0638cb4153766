#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "aib/sac.hpp"

namespace aib {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace io {

constexpr char kCheckpointMagic[9] = "AIBCK001";

template <class S>
inline std::vector<std::pair<std::string, ParamGroup<S>*>> agent_groups(
    Agent<S>& a) {
  return {{"actor", &a.group_actor()},       {"critic", &a.group_critic()},
          {"targets", &a.group_targets()},   {"alpha", &a.group_alpha()},
          {"dyn", &a.group_dyn()},           {"hyper_pi", &a.group_hyper_pi()},
          {"hyper_q", &a.group_hyper_q()}};
}

inline void write_u64(std::ostream& o, std::uint64_t v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint64_t read_u64(std::istream& i) {
  std::uint64_t v = 0;
  i.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline void write_str(std::ostream& o, const std::string& s) {
  write_u64(o, s.size());
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& i) {
  std::string s(read_u64(i), '\0');
  i.read(s.data(), static_cast<std::streamsize>(s.size()));
  return s;
}

template <class S>
inline void write_mat(std::ostream& o, const Mat<S>& m) {
  write_u64(o, static_cast<std::uint64_t>(m.rows()));
  write_u64(o, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = static_cast<double>(m.data()[i]);
    o.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
}
template <class S>
inline void read_mat(std::istream& in, Mat<S>& m) {
  Eigen::Index r = static_cast<Eigen::Index>(read_u64(in));
  Eigen::Index c = static_cast<Eigen::Index>(read_u64(in));
  if (m.rows() != r || m.cols() != c)
    throw IoError("checkpoint tensor shape mismatch");
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    m.data()[i] = static_cast<S>(v);
  }
}

/// Saves all parameter groups, Adam moments and step counters, and the
/// agent's RNG stream states.
template <class S>
inline void save_checkpoint(Agent<S>& a, const std::string& path,
                            long long iteration) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw IoError("cannot write checkpoint: " + path);
  o.write(kCheckpointMagic, 8);
  write_u64(o, static_cast<std::uint64_t>(iteration));
  auto groups = agent_groups(a);
  write_u64(o, groups.size());
  for (auto& [gname, g] : groups) {
    write_str(o, gname);
    write_u64(o, g->items.size());
    for (auto& [pname, p] : g->items) {
      write_str(o, pname);
      write_mat(o, p->value);
      write_mat(o, p->adam_m);
      write_mat(o, p->adam_v);
    }
  }
  write_u64(o, 6);
  write_str(o, "actor");
  write_u64(o, static_cast<std::uint64_t>(a.opt_actor().steps()));
  write_str(o, "critic");
  write_u64(o, static_cast<std::uint64_t>(a.opt_critic().steps()));
  write_str(o, "alpha");
  write_u64(o, static_cast<std::uint64_t>(a.opt_alpha().steps()));
  write_str(o, "dyn");
  write_u64(o, static_cast<std::uint64_t>(a.opt_dyn().steps()));
  write_str(o, "hyper_pi");
  write_u64(o, static_cast<std::uint64_t>(a.opt_hyper_pi().steps()));
  write_str(o, "hyper_q");
  write_u64(o, static_cast<std::uint64_t>(a.opt_hyper_q().steps()));
  write_u64(o, 2 + a.workers().size());
  write_str(o, "enc");
  write_u64(o, a.enc_rng().state());
  write_str(o, "batch");
  write_u64(o, a.batch_rng().state());
  for (std::size_t i = 0; i < a.workers().size(); ++i) {
    write_str(o, "worker" + std::to_string(i));
    write_u64(o, a.workers()[i].rng.state());
  }
  if (!o) throw IoError("short write on checkpoint: " + path);
}

/// Loads a checkpoint into an agent built from the same config. Returns the
/// stored iteration number.
template <class S>
inline long long load_checkpoint(Agent<S>& a, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (std::string(magic, 8) != kCheckpointMagic)
    throw IoError("bad checkpoint magic: " + path);
  long long iteration = static_cast<long long>(read_u64(in));
  auto groups = agent_groups(a);
  if (read_u64(in) != groups.size())
    throw IoError("checkpoint group count mismatch");
  for (auto& [gname, g] : groups) {
    if (read_str(in) != gname) throw IoError("checkpoint group order mismatch");
    if (read_u64(in) != g->items.size())
      throw IoError("checkpoint param count mismatch in group " + gname);
    for (auto& [pname, p] : g->items) {
      if (read_str(in) != pname)
        throw IoError("checkpoint param name mismatch: " + pname);
      read_mat(in, p->value);
      read_mat(in, p->adam_m);
      read_mat(in, p->adam_v);
    }
  }
  std::uint64_t n_opts = read_u64(in);
  for (std::uint64_t i = 0; i < n_opts; ++i) {
    std::string name = read_str(in);
    auto steps = static_cast<std::int64_t>(read_u64(in));
    if (name == "actor") a.opt_actor().set_steps(steps);
    else if (name == "critic") a.opt_critic().set_steps(steps);
    else if (name == "alpha") a.opt_alpha().set_steps(steps);
    else if (name == "dyn") a.opt_dyn().set_steps(steps);
    else if (name == "hyper_pi") a.opt_hyper_pi().set_steps(steps);
    else if (name == "hyper_q") a.opt_hyper_q().set_steps(steps);
    else throw IoError("unknown optimizer in checkpoint: " + name);
  }
  std::uint64_t n_rngs = read_u64(in);
  for (std::uint64_t i = 0; i < n_rngs; ++i) {
    std::string name = read_str(in);
    std::uint64_t state = read_u64(in);
    if (name == "enc") a.enc_rng().set_state(state);
    else if (name == "batch") a.batch_rng().set_state(state);
    else if (name.rfind("worker", 0) == 0) {
      std::size_t idx = std::stoul(name.substr(6));
      if (idx < a.workers().size()) a.workers()[idx].rng.set_state(state);
    } else {
      throw IoError("unknown RNG stream in checkpoint: " + name);
    }
  }
  if (!in) throw IoError("short read on checkpoint: " + path);
  return iteration;
}

/// Append-only JSON Lines writer.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path, bool append = false)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw IoError("cannot open for writing: " + path);
  }
  void write(const nlohmann::json& j) { out_ << j.dump() << "\n"; }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(nlohmann::json::parse(line));
  }
  return rows;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << text;
}

/// Minimal multi-series line plot written as a standalone SVG.
struct SvgSeries {
  std::string label;
  std::vector<double> x, y;
};

inline std::string svg_line_plot(const std::string& title,
                                 const std::vector<SvgSeries>& series,
                                 int width = 720, int height = 420) {
  const double ml = 60, mr = 150, mt = 40, mb = 45;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        first = false;
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  auto px = [&](double x) {
    return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr);
  };
  auto py = [&](double y) {
    return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb);
  };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                 "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  std::string s;
  s += "<svg xmlns='http://www.w3.org/2000/svg' width='" +
       std::to_string(width) + "' height='" + std::to_string(height) + "'>\n";
  s += "<rect width='100%' height='100%' fill='white'/>\n";
  s += "<text x='" + std::to_string(width / 2) +
       "' y='24' text-anchor='middle' font-size='16'>" + title + "</text>\n";
  // axes
  s += "<line x1='" + std::to_string(ml) + "' y1='" + std::to_string(mt) +
       "' x2='" + std::to_string(ml) + "' y2='" +
       std::to_string(height - mb) + "' stroke='black'/>\n";
  s += "<line x1='" + std::to_string(ml) + "' y1='" +
       std::to_string(height - mb) + "' x2='" + std::to_string(width - mr) +
       "' y2='" + std::to_string(height - mb) + "' stroke='black'/>\n";
  char buf[64];
  for (int i = 0; i <= 4; ++i) {
    double yv = ymin + (ymax - ymin) * i / 4.0;
    std::snprintf(buf, sizeof(buf), "%.3g", yv);
    s += "<text x='" + std::to_string(ml - 6) + "' y='" +
         std::to_string(py(yv) + 4) +
         "' text-anchor='end' font-size='11'>" + buf + "</text>\n";
    double xv = xmin + (xmax - xmin) * i / 4.0;
    std::snprintf(buf, sizeof(buf), "%.4g", xv);
    s += "<text x='" + std::to_string(px(xv)) + "' y='" +
         std::to_string(height - mb + 16) +
         "' text-anchor='middle' font-size='11'>" + buf + "</text>\n";
  }
  int ci = 0;
  for (auto& sr : series) {
    std::string pts;
    for (std::size_t i = 0; i < sr.x.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", px(sr.x[i]),
                    py(sr.y[i]));
      pts += buf;
    }
    const char* col = colors[ci % 8];
    s += "<polyline fill='none' stroke='" + std::string(col) +
         "' stroke-width='1.5' points='" + pts + "'/>\n";
    s += "<text x='" + std::to_string(width - mr + 10) + "' y='" +
         std::to_string(mt + 16 * ci + 10) + "' font-size='12' fill='" + col +
         "'>" + sr.label + "</text>\n";
    ++ci;
  }
  s += "</svg>\n";
  return s;
}

}  // namespace io
}  // namespace aib
