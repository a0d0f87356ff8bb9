#include "minutiae/minutia.hpp"

#include "minutiae/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace minutiae {
namespace {

void append_number(std::string& out, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

double parse_number(const std::string& token) {
  double v = 0.0;
  auto res = std::from_chars(token.data(), token.data() + token.size(), v);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size() || !std::isfinite(v)) {
    throw std::runtime_error("template: malformed number '" + token + "'");
  }
  return v;
}

}  // namespace

void MinutiaSet::validate() const {
  require(width > 0 && height > 0, "MinutiaSet: dimensions must be positive");
  for (const Minutia& m : minutiae) {
    require(m.x >= 0.0 && m.x < width && m.y >= 0.0 && m.y < height, "MinutiaSet: location outside image");
    require(m.score >= 0.0 && m.score <= 1.0, "MinutiaSet: score outside [0,1]");
  }
}

std::string encode_template(const MinutiaSet& set) {
  set.validate();
  std::string out = "#minutiae-v1 " + std::to_string(set.width) + ' ' + std::to_string(set.height) + ' ' +
                    std::to_string(set.size()) + '\n';
  for (const Minutia& m : set.minutiae) {
    append_number(out, m.x);
    out += ' ';
    append_number(out, m.y);
    out += ' ';
    append_number(out, m.direction.degrees());
    out += ' ';
    append_number(out, m.score);
    out += '\n';
  }
  return out;
}

MinutiaSet decode_template(const std::string& text) {
  std::istringstream in(text);
  std::string magic;
  MinutiaSet set;
  long count = -1;
  if (!(in >> magic >> set.width >> set.height >> count) || magic != "#minutiae-v1" || count < 0) {
    throw std::runtime_error("template: missing or malformed #minutiae-v1 header");
  }
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string tx, ty, td, ts, extra;
    if (!(fields >> tx)) continue;
    if (!(fields >> ty >> td >> ts) || (fields >> extra)) {
      throw std::runtime_error("template: expected 'x y direction score' but got '" + line + "'");
    }
    Minutia m;
    m.x = parse_number(tx);
    m.y = parse_number(ty);
    m.direction = Angle::direction(parse_number(td));
    m.score = parse_number(ts);
    m.provenance = Provenance::ground_truth;
    set.minutiae.push_back(m);
  }
  if (static_cast<long>(set.size()) != count) {
    throw std::runtime_error("template: header count " + std::to_string(count) + " but " +
                             std::to_string(set.size()) + " minutiae listed");
  }
  try {
    set.validate();
  } catch (const ContractViolation& e) {
    throw std::runtime_error(std::string("template: ") + e.what());
  }
  return set;
}

void write_template(const std::filesystem::path& path, const MinutiaSet& set) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << encode_template(set);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

MinutiaSet read_template(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return decode_template(buf.str());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace minutiae
