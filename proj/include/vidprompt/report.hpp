// SPDX-License-Identifier: Apache-2.0
//
// Run summaries: aggregate metric records over trials, and draw loss curves
// and metric bars as standalone SVG.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "vidprompt/experiment.hpp"

namespace vidprompt {

struct MetricAggregate {
  std::string source;  // metrics file stem
  std::string metric;
  std::string split;
  std::string protocol;
  std::size_t count = 0;      // defined values
  std::size_t undefined = 0;  // records with a null value
  double mean = 0.0;
  double stddev = 0.0;  // population
};

struct ReportSummary {
  std::vector<LossRow> loss;
  std::vector<MetricAggregate> metrics;
  std::string text;
};

inline std::vector<MetricAggregate> aggregate_metrics(const std::string& source,
                                                      const std::vector<nlohmann::json>& records) {
  using Key = std::tuple<std::string, std::string, std::string>;
  std::map<Key, std::vector<double>> values;
  std::map<Key, std::size_t> undefined;
  std::vector<Key> order;
  for (const auto& r : records) {
    Key k{r.at("metric").get<std::string>(), r.at("split").get<std::string>(), r.at("protocol").get<std::string>()};
    if (!values.count(k) && !undefined.count(k)) order.push_back(k);
    if (r.at("value").is_null()) {
      ++undefined[k];
      values[k];
    } else {
      values[k].push_back(r.at("value").get<double>());
      undefined[k];
    }
  }
  std::vector<MetricAggregate> out;
  for (const Key& k : order) {
    MetricAggregate a{source, std::get<0>(k), std::get<1>(k), std::get<2>(k)};
    const auto& v = values[k];
    a.count = v.size();
    a.undefined = undefined[k];
    if (!v.empty()) {
      double s = 0.0;
      for (double x : v) s += x;
      a.mean = s / double(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - a.mean) * (x - a.mean);
      a.stddev = std::sqrt(ss / double(v.size()));
    }
    out.push_back(a);
  }
  return out;
}

inline ReportSummary summarize_run(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("report: '" + dir + "' is not a directory");
  ReportSummary s;
  if (fs::exists(dir + "/loss.csv")) s.loss = read_loss_csv(dir + "/loss.csv");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() > 14 && name.ends_with(".metrics.jsonl")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    auto agg = aggregate_metrics(name.substr(0, name.size() - 14), read_metrics(f.string()));
    s.metrics.insert(s.metrics.end(), agg.begin(), agg.end());
  }

  std::ostringstream os;
  os << "run: " << dir << '\n';
  if (!s.loss.empty()) {
    os << "loss: " << s.loss.size() << " steps, first " << format_double(s.loss.front().loss) << ", last "
       << format_double(s.loss.back().loss) << '\n';
  }
  if (s.metrics.empty()) os << "no metric records\n";
  for (const auto& m : s.metrics) {
    os << m.source << '\t' << m.protocol << '\t' << m.split << '\t' << m.metric << '\t';
    if (m.count == 0) {
      os << "undefined";
    } else {
      os << "mean " << format_double(m.mean);
      if (m.count > 1) os << " sd " << format_double(m.stddev) << " n " << m.count;
    }
    if (m.undefined > 0) os << " (" << m.undefined << " undefined)";
    os << '\n';
  }
  s.text = os.str();
  return s;
}

namespace report_detail {

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

}  // namespace report_detail

inline std::string loss_svg(const std::vector<LossRow>& rows, int width = 640, int height = 360) {
  using report_detail::num;
  if (rows.empty()) throw std::invalid_argument("loss_svg: no rows");
  const double left = 60, right = 20, top = 20, bottom = 40;
  double lo = rows.front().loss, hi = lo;
  for (const auto& r : rows) {
    lo = std::min(lo, r.loss);
    hi = std::max(hi, r.loss);
  }
  if (hi == lo) hi = lo + 1.0;
  const double s0 = double(rows.front().step), s1 = std::max(double(rows.back().step), s0 + 1.0);
  auto x = [&](double s) { return left + (s - s0) / (s1 - s0) * (width - left - right); };
  auto y = [&](double l) { return top + (hi - l) / (hi - lo) * (height - top - bottom); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << height - bottom << "\" x2=\"" << width - right << "\" y2=\""
     << height - bottom << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << height - bottom
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << left - 5 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << num(hi)
     << "</text>\n";
  os << "<text x=\"" << left - 5 << "\" y=\"" << height - bottom << "\" text-anchor=\"end\" font-size=\"11\">"
     << num(lo) << "</text>\n";
  os << "<text x=\"" << width - right << "\" y=\"" << height - bottom + 15
     << "\" text-anchor=\"end\" font-size=\"11\">step " << rows.back().step << "</text>\n";
  os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (const auto& r : rows) os << num(x(double(r.step))) << ',' << num(y(r.loss)) << ' ';
  os << "\"/>\n</svg>\n";
  return os.str();
}

// Horizontal bars of metric means; only defined metrics are drawn.
inline std::string metrics_svg(const std::vector<MetricAggregate>& metrics, int width = 640) {
  using report_detail::escape;
  using report_detail::num;
  std::vector<const MetricAggregate*> shown;
  for (const auto& m : metrics)
    if (m.count > 0) shown.push_back(&m);
  const int row = 22, label_w = 300;
  const int height = std::max<int>(row * static_cast<int>(shown.size()) + 20, 40);
  double hi = 1.0;
  for (const auto* m : shown) hi = std::max(hi, m->mean);

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < shown.size(); ++i) {
    const auto& m = *shown[i];
    const double yy = 10.0 + double(i) * row;
    const double w = std::max(0.0, m.mean) / hi * (width - label_w - 80);
    os << "<text x=\"" << label_w - 6 << "\" y=\"" << yy + 14 << "\" text-anchor=\"end\" font-size=\"11\">"
       << escape(m.source + " " + m.metric) << "</text>\n";
    os << "<rect x=\"" << label_w << "\" y=\"" << yy + 3 << "\" width=\"" << num(w) << "\" height=\"" << row - 6
       << "\" fill=\"steelblue\"/>\n";
    os << "<text x=\"" << num(label_w + w + 4) << "\" y=\"" << yy + 14 << "\" font-size=\"11\">" << num(m.mean)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace vidprompt
