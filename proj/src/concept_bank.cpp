#include "mcm/concept_bank.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "mcm/random.hpp"

MCM_BEGIN_NAMESPACE

namespace {

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (norm(a) * norm(b));
}

std::vector<double> unit_gaussian(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (auto& x : v) x = standard_normal(rng);
  const double n = norm(v);
  for (auto& x : v) x /= n;
  return v;
}

std::vector<std::string> cosine_violations(const ConceptBank& bank) {
  std::vector<std::string> bad;
  const std::size_t count = bank.vector_count();
  for (std::size_t a = 0; a < count; ++a) {
    for (std::size_t b = a + 1; b < count; ++b) {
      const double c = cosine(bank.vector(a), bank.vector(b));
      if (!(c < kMaxBankCosine)) {
        std::ostringstream os;
        os << "(" << bank.vector_name(a) << ", " << bank.vector_name(b) << ") cosine " << c;
        bad.push_back(os.str());
      }
    }
  }
  return bad;
}

std::string format_vector(const std::vector<double>& v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ' ';
    os << v[i];
  }
  return os.str();
}

std::vector<double> parse_vector(const std::string& line, std::size_t dim, const std::string& what) {
  std::vector<double> v;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    double x = 0.0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), x);
    if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(x)) {
      throw IngestionError("bank file: bad number '" + tok + "' in " + what);
    }
    v.push_back(x);
  }
  if (v.size() != dim) {
    throw IngestionError("bank file: " + what + " has " + std::to_string(v.size()) + " values, expected " +
                         std::to_string(dim));
  }
  return v;
}

}  // namespace

const std::vector<double>& ConceptBank::vector(std::size_t id) const {
  if (id >= vector_count()) throw IndexError("bank vector id " + std::to_string(id) + " out of range");
  return (id % 2 == 0) ? positive[id / 2] : antonym[id / 2];
}

std::string ConceptBank::vector_name(std::size_t id) const {
  if (id >= vector_count()) throw IndexError("bank vector id " + std::to_string(id) + " out of range");
  return (id % 2 == 0) ? names[id / 2] : "Not " + names[id / 2];
}

std::size_t ConceptBank::index_of(const std::string& name) const {
  for (std::size_t j = 0; j < names.size(); ++j) {
    if (names[j] == name) return j;
  }
  std::string known;
  for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
  throw ContractError("unknown concept '" + name + "' (bank has: " + known + ")");
}

ConceptBank build_prototype_bank(const std::vector<std::string>& names, std::size_t dim,
                                 std::uint64_t seed) {
  if (dim < 8) throw ConfigError("prototype width must be at least 8, got " + std::to_string(dim));
  if (names.empty()) throw ConfigError("prototype bank needs at least one concept");
  ConceptBank bank;
  bank.names = names;
  bank.dim = dim;
  bank.source = "synthetic";
  for (int attempt = 0; attempt < kMaxBankAttempts; ++attempt) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(attempt)));
    bank.positive.clear();
    bank.antonym.clear();
    for (std::size_t j = 0; j < names.size(); ++j) {
      bank.positive.push_back(unit_gaussian(rng, dim));
      bank.antonym.push_back(unit_gaussian(rng, dim));
    }
    if (cosine_violations(bank).empty()) {
      validate_bank(bank);
      return bank;
    }
  }
  throw CapacityError("could not draw " + std::to_string(2 * names.size()) + " prototypes of width " +
                      std::to_string(dim) + " with pairwise cosine < 0.5 in " +
                      std::to_string(kMaxBankAttempts) + " attempts");
}

void validate_bank(const ConceptBank& bank) {
  if (bank.names.empty()) throw ValidationError("bank has no concepts");
  if (bank.positive.size() != bank.names.size() || bank.antonym.size() != bank.names.size()) {
    throw ValidationError("bank vectors do not match the concept list");
  }
  std::set<std::string> unique(bank.names.begin(), bank.names.end());
  if (unique.size() != bank.names.size()) throw ValidationError("bank concept names are not unique");
  for (std::size_t id = 0; id < bank.vector_count(); ++id) {
    const auto& v = bank.vector(id);
    if (v.size() != bank.dim) throw ValidationError("bank vector '" + bank.vector_name(id) + "' has wrong width");
    if (std::abs(norm(v) - 1.0) > 1e-6) {
      throw ValidationError("bank vector '" + bank.vector_name(id) + "' is not unit norm");
    }
  }
  auto bad = cosine_violations(bank);
  if (!bad.empty()) {
    std::string msg = "bank cosine invariant violated for:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ValidationError(msg);
  }
}

void save_bank(const ConceptBank& bank, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write bank file " + path.string());
  out << "MCMBANK 1\n" << bank.concepts() << ' ' << bank.dim << '\n';
  for (std::size_t j = 0; j < bank.concepts(); ++j) {
    out << bank.names[j] << '\n' << format_vector(bank.positive[j]) << '\n' << format_vector(bank.antonym[j]) << '\n';
  }
  if (!out) throw IoError("failed writing bank file " + path.string());
}

ConceptBank load_bank(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open bank file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "MCMBANK 1") {
    throw IngestionError("bank file " + path.string() + " lacks the 'MCMBANK 1' header");
  }
  std::size_t m = 0, dim = 0;
  if (!std::getline(in, line)) throw IngestionError("bank file: missing size line");
  {
    std::istringstream is(line);
    if (!(is >> m >> dim) || m == 0 || dim == 0) throw IngestionError("bank file: bad size line '" + line + "'");
  }
  ConceptBank bank;
  bank.dim = dim;
  bank.source = "loaded";
  auto normalized = [](std::vector<double> v) {
    const double n = norm(v);
    if (n == 0.0) throw ValidationError("bank file holds a zero vector");
    // Already-unit vectors keep their exact bits so save/load round-trips.
    if (std::abs(n - 1.0) > 1e-12) {
      for (auto& x : v) x /= n;
    }
    return v;
  };
  for (std::size_t j = 0; j < m; ++j) {
    std::string name, pos, neg;
    if (!std::getline(in, name) || !std::getline(in, pos) || !std::getline(in, neg)) {
      throw IngestionError("bank file: truncated at concept " + std::to_string(j));
    }
    if (name.empty()) throw IngestionError("bank file: empty concept name");
    bank.names.push_back(name);
    bank.positive.push_back(normalized(parse_vector(pos, dim, name)));
    bank.antonym.push_back(normalized(parse_vector(neg, dim, "Not " + name)));
  }
  validate_bank(bank);
  return bank;
}

Tensor bank_matrix(const ConceptBank& bank) {
  std::vector<Scalar> data;
  data.reserve(bank.vector_count() * bank.dim);
  for (std::size_t id = 0; id < bank.vector_count(); ++id) {
    for (double x : bank.vector(id)) data.push_back(static_cast<Scalar>(x));
  }
  return Tensor::from({bank.vector_count(), bank.dim}, std::move(data));
}

std::vector<std::size_t> prototype_ids(const std::vector<bool>& attributes) {
  std::vector<std::size_t> ids(attributes.size());
  for (std::size_t j = 0; j < attributes.size(); ++j) ids[j] = ConceptBank::id_for(j, attributes[j]);
  return ids;
}

Tensor prototypes_for(const std::vector<bool>& attributes, const ConceptBank& bank) {
  if (attributes.size() != bank.concepts()) {
    throw DimensionError("record has " + std::to_string(attributes.size()) + " attributes, bank has " +
                         std::to_string(bank.concepts()) + " concepts");
  }
  std::vector<Scalar> data;
  data.reserve(attributes.size() * bank.dim);
  for (std::size_t id : prototype_ids(attributes)) {
    for (double x : bank.vector(id)) data.push_back(static_cast<Scalar>(x));
  }
  return Tensor::from({attributes.size(), bank.dim}, std::move(data));
}

MCM_END_NAMESPACE
