#include "mcm/metrics.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "mcm/log.hpp"

MCM_BEGIN_NAMESPACE

BinaryMetrics binary_metrics(const ConfusionCounts& c) {
  BinaryMetrics m;
  const double total = static_cast<double>(c.tp + c.fp + c.tn + c.fn);
  m.accuracy = total > 0 ? static_cast<double>(c.tp + c.tn) / total : 0.0;
  m.precision = (c.tp + c.fp) > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 1.0;
  m.recall = (c.tp + c.fn) > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 1.0;
  m.f1 = (m.precision + m.recall) > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

double psnr_from_mse(double mse) {
  if (!(mse > 0.0)) return kPsnrCeiling;
  return std::min(kPsnrCeiling, 10.0 * std::log10(1.0 / mse));
}

MetricsReport classification_metrics(const std::vector<std::vector<bool>>& predictions,
                                     const std::vector<std::vector<bool>>& labels) {
  if (predictions.size() != labels.size()) throw DimensionError("prediction and label counts differ");
  if (labels.empty()) throw ContractError("cannot score an empty label set");
  const std::size_t m = labels.front().size();
  MetricsReport r;
  r.samples = labels.size();
  r.confusion.assign(m, {});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].size() != m || predictions[i].size() != m) throw DimensionError("ragged label matrix");
    for (std::size_t j = 0; j < m; ++j) {
      auto& c = r.confusion[j];
      const bool p = predictions[i][j];
      const bool y = labels[i][j];
      if (p && y) ++c.tp;
      else if (p && !y) ++c.fp;
      else if (!p && y) ++c.fn;
      else ++c.tn;
    }
  }
  for (const auto& c : r.confusion) {
    const auto b = binary_metrics(c);
    r.per_concept.push_back(b);
    r.accuracy += b.accuracy;
    r.precision += b.precision;
    r.recall += b.recall;
    r.f1 += b.f1;
  }
  const double dm = static_cast<double>(m);
  r.accuracy /= dm;
  r.precision /= dm;
  r.recall /= dm;
  r.f1 /= dm;
  return r;
}

std::vector<std::vector<bool>> predict_concepts(const Tensor& concepts, const BankView& bank) {
  if (concepts.dim() != 3 || concepts.size(2) != bank.vectors.size(1) || concepts.size(1) != bank.concepts()) {
    throw DimensionError("predict_concepts: concepts " + shape_str(concepts.shape()) + " vs bank " +
                         shape_str(bank.vectors.shape()));
  }
  const std::size_t b = concepts.size(0);
  const std::size_t m = concepts.size(1);
  const std::size_t e = concepts.size(2);
  auto c = concepts.data();
  auto v = bank.vectors.data();
  auto dot = [e](const Scalar* x, const Scalar* y) {
    double s = 0.0;
    for (std::size_t t = 0; t < e; ++t) s += double(x[t]) * double(y[t]);
    return s;
  };
  std::vector<std::vector<bool>> out(b, std::vector<bool>(m));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const Scalar* row = c.data() + (i * m + j) * e;
      const Scalar* pos = v.data() + (2 * j) * e;
      const Scalar* neg = v.data() + (2 * j + 1) * e;
      const double rn = std::sqrt(dot(row, row));
      double sp = dot(row, pos);
      double sn = dot(row, neg);
      if (rn == 0.0) {
        log_warn("zero-norm concept row; predicting from raw dot products");
      } else {
        sp /= rn * std::sqrt(dot(pos, pos));
        sn /= rn * std::sqrt(dot(neg, neg));
      }
      out[i][j] = sp >= sn;
    }
  }
  return out;
}

MetricsReport evaluate(const Model& model, const std::vector<DatasetRecord>& data, const ConceptBank& bank,
                       const EvalOptions& options) {
  if (data.empty()) throw ContractError("cannot evaluate on an empty dataset");
  if (options.batch == 0) throw ConfigError("evaluation batch must be at least 1");
  const auto start = std::chrono::steady_clock::now();
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const BankView view = project_bank(model, bank);
  std::vector<std::vector<bool>> preds;
  std::vector<std::vector<bool>> labels;
  double sq_err = 0.0;
  std::size_t sq_count = 0;
  double l_re = 0.0, l_dis = 0.0, l_con = 0.0;
  std::size_t batches = 0;
  for (std::size_t first = 0; first < data.size(); first += options.batch) {
    const std::size_t last = std::min(data.size(), first + options.batch);
    IndexList idx;
    for (std::size_t i = first; i < last; ++i) idx.push_back(i);
    const std::uint64_t seed = mix_seed(options.seed, batches);
    const MaskPlan plan = model.plan(options.test_ratio, seed, options.shape);
    Tensor patches = batch_patches(data, idx, cfg);
    ForwardOutput fwd = model.forward(patches, plan);

    auto p = predict_concepts(fwd.concepts, view);
    std::vector<std::size_t> ids;
    for (std::size_t i : idx) {
      labels.push_back(data[i].attributes);
      auto rec_ids = prototype_ids(data[i].attributes);
      ids.insert(ids.end(), rec_ids.begin(), rec_ids.end());
    }
    preds.insert(preds.end(), p.begin(), p.end());

    if (!plan.masked.empty()) {
      auto r = fwd.recon.data();
      auto t = patches.data();
      const std::size_t n = cfg.patches();
      const std::size_t d = cfg.patch_dim();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t z : plan.masked) {
          for (std::size_t k = 0; k < d; ++k) {
            const std::size_t at = (i * n + z) * d + k;
            const double pix = std::clamp(static_cast<double>(r[at]), 0.0, 1.0);
            const double diff = pix - static_cast<double>(t[at]);
            sq_err += diff * diff;
            ++sq_count;
          }
        }
      }
    }
    l_re += static_cast<double>(masked_recon_loss(fwd.recon, patches, plan.masked).item());
    l_con += static_cast<double>(weighted_concept_loss(fwd.concepts, view, ids, options.loss).item());
    Rng urng(mix_seed(seed, 0x646973ULL));
    const SingleHotMask u = sample_single_hot(cfg.concepts, urng);
    l_dis += static_cast<double>(disentangle_loss(model, fwd, u, view).loss.item());
    ++batches;
  }
  MetricsReport report = classification_metrics(preds, labels);
  report.masked_mse = sq_count ? sq_err / static_cast<double>(sq_count) : 0.0;
  report.masked_psnr = psnr_from_mse(report.masked_mse);
  report.l_re = l_re / static_cast<double>(batches);
  report.l_dis = l_dis / static_cast<double>(batches);
  report.l_concept = l_con / static_cast<double>(batches);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string format_report(const MetricsReport& r, const std::vector<std::string>& names) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "samples      " << r.samples << '\n'
     << "accuracy     " << r.accuracy << '\n'
     << "precision    " << r.precision << '\n'
     << "recall       " << r.recall << '\n'
     << "f1           " << r.f1 << '\n'
     << "masked_mse   " << r.masked_mse << '\n'
     << "masked_psnr  " << r.masked_psnr << '\n'
     << "l_re         " << r.l_re << '\n'
     << "l_dis        " << r.l_dis << '\n'
     << "l_concept    " << r.l_concept << '\n';
  for (std::size_t j = 0; j < r.per_concept.size(); ++j) {
    const auto& b = r.per_concept[j];
    os << "  " << (j < names.size() ? names[j] : "concept " + std::to_string(j)) << ": acc " << b.accuracy
       << " p " << b.precision << " r " << b.recall << " f1 " << b.f1 << '\n';
  }
  return os.str();
}

std::string report_csv_header() {
  return "accuracy,precision,recall,f1,masked_mse,masked_psnr,l_re,l_dis,l_concept,samples";
}

std::string report_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os << std::setprecision(10) << r.accuracy << ',' << r.precision << ',' << r.recall << ',' << r.f1 << ','
     << r.masked_mse << ',' << r.masked_psnr << ',' << r.l_re << ',' << r.l_dis << ',' << r.l_concept << ','
     << r.samples;
  return os.str();
}

MCM_END_NAMESPACE
