// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "zerase/checkpoint.hpp"
#include "zerase/harness.hpp"

namespace zerase {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kW = 640, kH = 400, kL = 70, kR = 20, kT = 36, kB = 50;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

struct Series {
  std::string label;
  std::vector<double> x{}, y{};
  bool dashed = false;
};

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kL + (x - x0) / (x1 - x0) * (kW - kL - kR); }
  double py(double y) const { return kH - kB - (y - y0) / (y1 - y0) * (kH - kT - kB); }
};

Frame frame_for(const std::vector<Series>& ss) {
  Frame f{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& s : ss)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      f.x0 = std::min(f.x0, s.x[i]);
      f.x1 = std::max(f.x1, s.x[i]);
      f.y0 = std::min(f.y0, s.y[i]);
      f.y1 = std::max(f.y1, s.y[i]);
    }
  if (!std::isfinite(f.x0)) f = {0, 1, 0, 1};
  if (f.x1 <= f.x0) f.x1 = f.x0 + 1;
  if (f.y1 <= f.y0) f.y1 = f.y0 + 1;
  const double pad = 0.05 * (f.y1 - f.y0);
  f.y0 -= pad;
  f.y1 += pad;
  return f;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

void axes(std::ostream& os, const Frame& f, const std::string& title, const std::string& xl, const std::string& yl) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << kW - kL - kR << "\" height=\"" << kH - kT - kB
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x=\"" << f.px(xv) << "\" y=\"" << kH - kB + 16 << "\" text-anchor=\"middle\">" << fmt(xv)
       << "</text>\n";
    os << "<text x=\"" << kL - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
  }
  os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">" << xl << "</text>\n";
  os << "<text transform=\"translate(16," << kH / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << yl
     << "</text>\n";
}

void line_plot(const fs::path& svg, const std::string& title, const std::string& xl, const std::string& yl,
               const std::vector<Series>& ss) {
  const Frame f = frame_for(ss);
  std::ofstream os(svg);
  if (!os) throw IoError("cannot write '" + svg.string() + "'");
  axes(os, f, title, xl, yl);
  for (std::size_t k = 0; k < ss.size(); ++k) {
    const auto& s = ss[k];
    const char* c = kColors[k % std::size(kColors)];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\""
       << (s.dashed ? " stroke-dasharray=\"6,4\"" : "") << " points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) os << f.px(s.x[i]) << ',' << f.py(s.y[i]) << ' ';
    os << "\"/>\n<text x=\"" << kL + 10 << "\" y=\"" << kT + 16 + 14 * k << "\" fill=\"" << c << "\">" << s.label
       << "</text>\n";
  }
  os << "</svg>\n";
}

void write_csv(const fs::path& p, const std::vector<Series>& ss) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write '" + p.string() + "'");
  os << "step";
  for (const auto& s : ss) os << ',' << s.label;
  os << '\n' << std::setprecision(17);
  const std::size_t n = ss.empty() ? 0 : ss.front().x.size();
  for (std::size_t i = 0; i < n; ++i) {
    os << ss.front().x[i];
    for (const auto& s : ss) os << ',' << (i < s.y.size() ? s.y[i] : std::nan(""));
    os << '\n';
  }
}

std::vector<std::vector<std::string>> read_table(const fs::path& p, char sep) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream f(p);
  for (std::string line; std::getline(f, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, sep);) cells.push_back(c);
    rows.push_back(std::move(cells));
  }
  return rows;
}

// Points (last two columns are x0,x1) from a samples CSV.
std::vector<std::pair<double, double>> read_points(const fs::path& p) {
  std::vector<std::pair<double, double>> pts;
  const auto rows = read_table(p, ',');
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].size() >= 4) pts.emplace_back(std::stod(rows[i][2]), std::stod(rows[i][3]));
  return pts;
}

void scatter_plot(const fs::path& svg, const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& sets) {
  std::vector<Series> bounds;
  for (const auto& [label, pts] : sets) {
    Series s{label};
    for (const auto& [x, y] : pts) {
      s.x.push_back(x);
      s.y.push_back(y);
    }
    bounds.push_back(std::move(s));
  }
  const Frame f = frame_for(bounds);
  std::ofstream os(svg);
  if (!os) throw IoError("cannot write '" + svg.string() + "'");
  axes(os, f, "samples before / after erasure", "x0", "x1");
  for (std::size_t k = 0; k < bounds.size(); ++k) {
    const char* c = kColors[k % std::size(kColors)];
    for (std::size_t i = 0; i < bounds[k].x.size(); ++i)
      os << "<circle cx=\"" << f.px(bounds[k].x[i]) << "\" cy=\"" << f.py(bounds[k].y[i]) << "\" r=\"1.6\" fill=\"" << c
         << "\" fill-opacity=\"0.5\"/>\n";
    os << "<text x=\"" << kL + 10 << "\" y=\"" << kT + 16 + 14 * k << "\" fill=\"" << c << "\">" << bounds[k].label
       << "</text>\n";
  }
  os << "</svg>\n";
}

void heatmap(const fs::path& svg, const std::vector<std::vector<std::string>>& rows) {
  // rows[0] = header "layer\thead0\thead1..."; rows[i] = "l\tm0\tm1...".
  std::vector<std::vector<double>> m;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::vector<double> r;
    for (std::size_t j = 1; j < rows[i].size(); ++j) r.push_back(std::stod(rows[i][j]));
    if (!r.empty()) m.push_back(std::move(r));
  }
  double hi = 0.0;
  for (const auto& r : m)
    for (double v : r) hi = std::max(hi, v);
  std::ofstream os(svg);
  if (!os) throw IoError("cannot write '" + svg.string() + "'");
  const double cw = 80, ch = 40;
  const std::size_t nh = m.empty() ? 0 : m.front().size();
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 100 + cw * nh << "\" height=\"" << 80 + ch * m.size()
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"10\" y=\"20\" font-size=\"14\">attention mass on the concept span (layer x head)</text>\n";
  for (std::size_t l = 0; l < m.size(); ++l)
    for (std::size_t h = 0; h < m[l].size(); ++h) {
      const int shade = static_cast<int>(255.0 * (1.0 - (hi > 0 ? m[l][h] / hi : 0.0)));
      os << "<rect x=\"" << 60 + cw * h << "\" y=\"" << 40 + ch * l << "\" width=\"" << cw << "\" height=\"" << ch
         << "\" fill=\"rgb(255," << shade << ',' << shade << ")\" stroke=\"#888\"/>\n<text x=\"" << 60 + cw * h + cw / 2
         << "\" y=\"" << 44 + ch * l + ch / 2 << "\" text-anchor=\"middle\">" << fmt(m[l][h]) << "</text>\n";
    }
  for (std::size_t l = 0; l < m.size(); ++l)
    os << "<text x=\"54\" y=\"" << 44 + ch * l + ch / 2 << "\" text-anchor=\"end\">L" << l << "</text>\n";
  for (std::size_t h = 0; h < nh; ++h)
    os << "<text x=\"" << 60 + cw * h + cw / 2 << "\" y=\"" << 56 + ch * m.size() << "\" text-anchor=\"middle\">H" << h
       << "</text>\n";
  os << "</svg>\n";
}

}  // namespace

std::vector<fs::path> emit_plots(const fs::path& run_dir) {
  const fs::path mp = run_dir / "metrics.jsonl";
  if (!fs::exists(mp)) throw ValidationError("no metrics.jsonl in '" + run_dir.string() + "'");
  const fs::path out = run_dir / "plots";
  fs::create_directories(out);
  std::vector<fs::path> files;

  double eps = 0.0, alpha = 0.0;
  if (std::ifstream cf(run_dir / "config.json"); cf) {
    const json c = json::parse(cf);
    eps = c.at("erase").value("epsilon", 0.0);
    alpha = c.at("erase").value("alpha", 0.0);
  }

  Series base_loss{"base loss"}, lam{"lambda"}, lam_star{"lambda* (exact)"}, ler{"L_er"}, lerase{"L_erase"},
      lattn{"L_attn"}, lpr{"L_pr"}, drift{"drift"}, bound{"exact bound"}, linear{"t*eps*alpha", {}, {}, true};
  {
    std::ifstream f(mp);
    for (std::string line; std::getline(f, line);) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      const std::string kind = j.value("kind", "");
      if (kind == "base") {
        base_loss.x.push_back(j.at("step").get<double>());
        base_loss.y.push_back(j.at("loss").get<double>());
      } else if (kind == "erase") {
        const double s = j.at("step").get<double>();
        for (Series* p : {&lam, &lam_star, &ler, &lerase, &lattn, &lpr, &drift, &bound, &linear}) p->x.push_back(s);
        lam.y.push_back(j.at("lambda").get<double>());
        lam_star.y.push_back(j.at("lambda_star").is_null() ? std::nan("") : j.at("lambda_star").get<double>());
        ler.y.push_back(j.at("L_er").get<double>());
        lerase.y.push_back(j.at("L_erase").get<double>());
        lattn.y.push_back(j.at("L_attn").get<double>());
        lpr.y.push_back(j.at("L_pr").get<double>());
        drift.y.push_back(j.at("drift").get<double>());
        bound.y.push_back(j.at("bound").get<double>());
        linear.y.push_back((s - 1.0) * eps * alpha);
      }
    }
  }
  auto emit = [&](const std::string& stem, const std::string& title, const std::string& yl, std::vector<Series> ss) {
    line_plot(out / (stem + ".svg"), title, "step", yl, ss);
    write_csv(out / (stem + ".csv"), ss);
    files.push_back(out / (stem + ".svg"));
    files.push_back(out / (stem + ".csv"));
  };
  if (!base_loss.x.empty()) emit("base_loss", "base flow-matching loss", "loss", {base_loss});
  if (!lam.x.empty()) {
    std::vector<Series> l{lam};
    if (std::any_of(lam_star.y.begin(), lam_star.y.end(), [](double v) { return std::isfinite(v); }))
      l.push_back(lam_star);
    emit("lambda", "dual variable", "lambda", l);
    emit("losses", "erasure losses", "loss", {ler, lerase, lattn, lpr});
    emit("drift", "preservation drift vs bound", "L_pr(theta_t) - L_pr(theta_0)", {drift, bound, linear});
  }
  if (fs::exists(run_dir / "localize.tsv")) {
    heatmap(out / "heatmap.svg", read_table(run_dir / "localize.tsv", '\t'));
    fs::copy_file(run_dir / "localize.tsv", out / "heatmap.csv", fs::copy_options::overwrite_existing);
    files.push_back(out / "heatmap.svg");
  }
  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> sets;
  std::vector<fs::path> sample_files;
  for (const auto& e : fs::directory_iterator(run_dir)) {
    const std::string n = e.path().filename().string();
    if ((n.starts_with("samples_before_") || n.starts_with("samples_after_")) && n.ends_with(".csv"))
      sample_files.push_back(e.path());
  }
  std::sort(sample_files.begin(), sample_files.end());
  for (const auto& p : sample_files) sets.emplace_back(p.stem().string().substr(8), read_points(p));
  if (!sets.empty()) {
    scatter_plot(out / "scatter.svg", sets);
    files.push_back(out / "scatter.svg");
  }
  if (fs::exists(run_dir / "sweep.tsv")) {
    const auto rows = read_table(run_dir / "sweep.tsv", '\t');
    std::map<double, std::vector<std::pair<double, double>>> by_eps;
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i].size() >= 4) by_eps[std::stod(rows[i][0])].emplace_back(std::stod(rows[i][2]), std::stod(rows[i][3]));
    Series eff{"median efficacy"}, pres{"median preservation"};
    for (auto& [e, v] : by_eps) {
      std::vector<double> a, b;
      for (auto [x, y] : v) {
        a.push_back(x);
        b.push_back(y);
      }
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      const std::size_t n = a.size();
      eff.x.push_back(std::log10(e));
      pres.x.push_back(std::log10(e));
      eff.y.push_back(n % 2 ? a[n / 2] : 0.5 * (a[n / 2 - 1] + a[n / 2]));
      pres.y.push_back(n % 2 ? b[n / 2] : 0.5 * (b[n / 2 - 1] + b[n / 2]));
    }
    line_plot(out / "sweep_efficacy.svg", "efficacy vs epsilon", "log10 epsilon", "energy distance", {eff});
    line_plot(out / "sweep_preservation.svg", "preservation vs epsilon", "log10 epsilon", "energy distance", {pres});
    write_csv(out / "sweep.csv", {eff, pres});
    files.push_back(out / "sweep_efficacy.svg");
    files.push_back(out / "sweep_preservation.svg");
    files.push_back(out / "sweep.csv");
  }
  if (fs::exists(run_dir / "quadratic_lambda.csv")) {
    const auto rows = read_table(run_dir / "quadratic_lambda.csv", ',');
    Series impl{"implicit lambda"}, ex{"exact lambda*"};
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const double s = std::stod(rows[i][0]);
      impl.x.push_back(s);
      ex.x.push_back(s);
      impl.y.push_back(std::stod(rows[i][1]));
      ex.y.push_back(std::stod(rows[i][2]));
    }
    line_plot(out / "quadratic_lambda.svg", "quadratic testbed: implicit vs exact dual", "step", "lambda", {impl, ex});
    files.push_back(out / "quadratic_lambda.svg");
  }
  return files;
}

}  // namespace zerase
