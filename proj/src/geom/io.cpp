#include "roadforge/geom/io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "roadforge/common/error.hpp"

namespace roadforge::geom {

std::string format_decimal(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  std::string s(buf, res.ptr);
  auto dot_pos = s.find('.');
  if (dot_pos == std::string::npos) {
    s += '.';
    dot_pos = s.size() - 1;
  }
  const std::size_t frac = s.size() - dot_pos - 1;
  if (frac < 6) s.append(6 - frac, '0');
  return s;
}

namespace {

double parse_double(const std::string& tok, int lineno) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    fail(ErrorCode::Parse, "line " + std::to_string(lineno) + ": bad number '" + tok + "'");
  }
  return v;
}

int parse_int(const std::string& tok, int lineno) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    fail(ErrorCode::Parse, "line " + std::to_string(lineno) + ": bad integer '" + tok + "'");
  }
  return v;
}

std::vector<std::string> tokens(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

}  // namespace

std::string write_rgf(const RoadGraph& g) {
  const RoadGraph c = canonicalize(g);
  std::string out = "RGF1 " + std::to_string(c.node_count()) + " " + std::to_string(c.edge_count()) + "\n";
  for (const auto& p : c.nodes) out += "v " + format_decimal(p.x) + " " + format_decimal(p.y) + "\n";
  for (const auto& e : c.edges) out += "e " + std::to_string(e.a) + " " + std::to_string(e.b) + "\n";
  return out;
}

RoadGraph parse_rgf(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty()) fail(ErrorCode::Parse, "empty RGF input");
  const auto head = tokens(lines[0]);
  if (head.size() != 3 || head[0] != "RGF1") fail(ErrorCode::Parse, "missing RGF1 header");
  const int nv = parse_int(head[1], 1);
  const int ne = parse_int(head[2], 1);
  if (nv < 0 || ne < 0) fail(ErrorCode::Parse, "negative counts in header");
  if (static_cast<int>(lines.size()) != 1 + nv + ne) {
    fail(ErrorCode::Parse, "expected " + std::to_string(1 + nv + ne) + " lines, found " + std::to_string(lines.size()));
  }
  RoadGraph g;
  for (int i = 0; i < nv; ++i) {
    const auto t = tokens(lines[1 + i]);
    if (t.size() != 3 || t[0] != "v") fail(ErrorCode::Parse, "line " + std::to_string(2 + i) + ": expected vertex");
    g.nodes.push_back({parse_double(t[1], 2 + i), parse_double(t[2], 2 + i)});
  }
  for (int k = 0; k < ne; ++k) {
    const int lineno = 2 + nv + k;
    const auto t = tokens(lines[1 + nv + k]);
    if (t.size() != 3 || t[0] != "e") fail(ErrorCode::Parse, "line " + std::to_string(lineno) + ": expected edge");
    g.edges.push_back({parse_int(t[1], lineno), parse_int(t[2], lineno)});
  }
  try {
    validate(g);
  } catch (const Error& err) {
    fail(ErrorCode::Parse, err.what());
  }
  return g;
}

std::string write_sequence(const CanonicalSequence& seq) {
  std::string out = "SEQ1 " + std::to_string(seq.steps.size()) + " " + std::to_string(seq.frontier_size) + "\n";
  for (const auto& s : seq.steps) {
    out += "s ";
    for (auto bit : s.adjacency) out += bit ? '1' : '0';
    out += " " + format_decimal(s.coords.x) + " " + format_decimal(s.coords.y) + (s.stop ? " 1\n" : " 0\n");
  }
  return out;
}

CanonicalSequence parse_sequence(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty()) fail(ErrorCode::Parse, "empty sequence input");
  const auto head = tokens(lines[0]);
  if (head.size() != 3 || head[0] != "SEQ1") fail(ErrorCode::Parse, "missing SEQ1 header");
  const int n = parse_int(head[1], 1);
  CanonicalSequence seq;
  seq.frontier_size = parse_int(head[2], 1);
  if (static_cast<int>(lines.size()) != 1 + n) fail(ErrorCode::Parse, "sequence length mismatch");
  for (int i = 0; i < n; ++i) {
    const auto t = tokens(lines[1 + i]);
    if (t.size() != 5 || t[0] != "s" || static_cast<int>(t[1].size()) != seq.frontier_size) {
      fail(ErrorCode::Parse, "line " + std::to_string(2 + i) + ": malformed step");
    }
    SequenceStep step;
    for (char ch : t[1]) {
      if (ch != '0' && ch != '1') fail(ErrorCode::Parse, "adjacency bits must be 0/1");
      step.adjacency.push_back(ch == '1' ? 1 : 0);
    }
    step.coords = {parse_double(t[2], 2 + i), parse_double(t[3], 2 + i)};
    step.stop = parse_int(t[4], 2 + i) != 0;
    seq.steps.push_back(std::move(step));
  }
  return seq;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write " + tmp);
    out << text;
    if (!out) fail(ErrorCode::Io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void save_rgf(const std::filesystem::path& path, const RoadGraph& g) { write_text_file(path, write_rgf(g)); }
RoadGraph load_rgf(const std::filesystem::path& path) { return parse_rgf(read_text_file(path)); }
void save_sequence(const std::filesystem::path& path, const CanonicalSequence& seq) {
  write_text_file(path, write_sequence(seq));
}
CanonicalSequence load_sequence(const std::filesystem::path& path) { return parse_sequence(read_text_file(path)); }

}  // namespace roadforge::geom
