#include "inheritlab/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "inheritlab/behave.hpp"
#include "inheritlab/error.hpp"

namespace ilab {

std::optional<std::size_t> unique_argmax(const std::vector<SweepCell>& cells) {
  std::optional<std::size_t> best;
  bool tied = false;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!cells[i].error.empty()) continue;
    if (!best || cells[i].iia > cells[*best].iia) {
      best = i;
      tied = false;
    } else if (cells[i].iia == cells[*best].iia) {
      tied = true;
    }
  }
  if (tied) return std::nullopt;
  return best;
}

void write_text(const std::string& text, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::kIo, "cannot write " + path);
  os << text;
  if (!os) fail(ErrorCode::kIo, "write failed for " + path);
}

void write_grid_csv(const std::vector<SweepCell>& cells, const std::string& path) {
  std::ostringstream os;
  os << "layer,role,setting,iia,mask_width,final_loss\n";
  for (const SweepCell& c : cells) {
    os << c.layer << ',' << role_name(c.role) << ',' << setting_name(c.setting) << ',';
    if (c.error.empty())
      os << format_double(c.iia) << ',' << c.mask_width << ',' << format_double(c.final_loss);
    else
      os << ",,";
    os << '\n';
  }
  write_text(os.str(), path);
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::vector<SweepCell> read_sweep_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::kIo, "cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) fail(ErrorCode::kIngest, path + ": empty file");
  const std::vector<std::string> header = split_csv(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"layer", "role", "setting", "iia", "mask_width", "final_loss"})
    if (!col.count(need)) fail(ErrorCode::kIngest, path + ": missing column " + need);
  std::vector<SweepCell> cells;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv(line);
    if (f.size() != header.size())
      fail(ErrorCode::kIngest, path + ":" + std::to_string(lineno) + ": wrong number of fields");
    try {
      SweepCell c;
      c.layer = std::stoul(f[col["layer"]]);
      c.role = parse_role(f[col["role"]]);
      c.setting = parse_setting(f[col["setting"]]);
      if (col.count("error")) c.error = f[col["error"]];
      if (f[col["iia"]].empty()) {
        if (c.error.empty()) c.error = "failed";
      } else {
        c.iia = std::stod(f[col["iia"]]);
        c.mask_width = std::stoul(f[col["mask_width"]]);
        c.final_loss = std::stod(f[col["final_loss"]]);
      }
      if (col.count("iia_gen") && !f[col["iia_gen"]].empty()) c.iia_gen = std::stod(f[col["iia_gen"]]);
      cells.push_back(std::move(c));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      fail(ErrorCode::kIngest, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cells;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// White (0) to dark blue (1).
std::string colour(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(247 + (8 - 247) * t + 0.5);
  const int g = static_cast<int>(251 + (48 - 251) * t + 0.5);
  const int b = static_cast<int>(255 + (107 - 255) * t + 0.5);
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

std::string escape_xml(const std::string& s) {
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

}  // namespace

std::string heatmap_svg(const std::vector<SweepCell>& cells, const std::string& title) {
  std::size_t n_layers = 0;
  for (const SweepCell& c : cells) n_layers = std::max(n_layers, c.layer + 1);
  const std::vector<TokenRole> roles = all_roles();
  const int cw = 110, ch = 44, left = 70, top = 60;
  const int width = left + cw * static_cast<int>(roles.size()) + 20;
  const int height = top + ch * static_cast<int>(n_layers) + 50;
  const std::optional<std::size_t> best = unique_argmax(cells);

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"24\" font-size=\"15\">" << escape_xml(title) << "</text>\n";
  for (std::size_t r = 0; r < roles.size(); ++r)
    os << "<text x=\"" << left + cw * static_cast<int>(r) + cw / 2 << "\" y=\"" << top - 8
       << "\" text-anchor=\"middle\">" << role_name(roles[r]) << "</text>\n";
  for (std::size_t l = 0; l < n_layers; ++l) {
    const int y = top + ch * static_cast<int>(n_layers - 1 - l);
    os << "<text x=\"" << left - 8 << "\" y=\"" << y + ch / 2 + 4 << "\" text-anchor=\"end\">L" << l
       << "</text>\n";
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const SweepCell& c = cells[i];
    const auto it = std::find(roles.begin(), roles.end(), c.role);
    const int x = left + cw * static_cast<int>(it - roles.begin());
    const int y = top + ch * static_cast<int>(n_layers - 1 - c.layer);
    const bool ok = c.error.empty();
    os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cw << "\" height=\"" << ch << "\" fill=\""
       << (ok ? colour(c.iia) : "#bdbdbd") << "\" stroke=\"#ffffff\"/>\n";
    os << "<text x=\"" << x + cw / 2 << "\" y=\"" << y + ch / 2 + 4 << "\" text-anchor=\"middle\" fill=\""
       << (ok && c.iia > 0.6 ? "white" : "black") << "\">" << (ok ? fmt("%.3f", c.iia) : "failed") << "</text>\n";
    if (best && *best == i)
      os << "<rect class=\"best\" x=\"" << x + 2 << "\" y=\"" << y + 2 << "\" width=\"" << cw - 4
         << "\" height=\"" << ch - 4 << "\" fill=\"none\" stroke=\"#d7301f\" stroke-width=\"3\"/>\n";
  }
  os << "<text x=\"" << left << "\" y=\"" << height - 16 << "\">IIA per (layer, token role)";
  if (best) os << "; maximum " << fmt("%.3f", cells[*best].iia) << " at L" << cells[*best].layer << " "
               << role_name(cells[*best].role);
  os << "</text>\n</svg>\n";
  return os.str();
}

}  // namespace ilab
