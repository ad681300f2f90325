#include "txnfm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "txnfm/eval.hpp"
#include "txnfm/rng.hpp"

namespace txnfm::synth {

namespace {

constexpr double kPi = std::numbers::pi;

// Label logit weights. Which surface each signal lives on is what the fusion
// experiments measure, so the placement here is deliberate: merchant group,
// operation style and city cluster exist only in description text; bureau,
// cyclic and product features only in the tabular vector.
constexpr double kWMerchant = 1.0;
constexpr double kWBureau = 0.9;
constexpr double kWStyle = 0.55;
constexpr double kWTrend = 0.3;
constexpr double kWCyclic = 0.8;
constexpr double kWProduct = 0.7;
constexpr double kWInteraction = 1.2;

constexpr double kRateA = 2.2;   // transactions per month
constexpr double kRateB = 1.6;
constexpr double kRateC = 5.5;
constexpr double kTrendPerMonth = 0.04;

const char* kGroupHi[12] = {"AURUMHAUS", "VELVETINE", "LUMIERE",  "CASTELLAN",
                            "ORREFINE",  "GILDEDOAK", "SABLEROW", "MAISONDOR",
                            "PLATINEA",  "REGALIA",   "OPULENZA", "CHARTWELL"};
const char* kGroupLo[12] = {"MAXIBARATO", "POUPEMAIS", "DESCONTAO", "PRECOBOM",
                            "ECONOMIX",   "BARGANHA",  "SUPERDEZ",  "CUSTOLEVE",
                            "PECHINCHA",  "FEIRAVIVA", "LOJAUM",    "TUDOBARATO"};
const char* kCatWords[6] = {"MERCADO", "VESTUARIO", "FARMACIA",
                            "RESTAURANTE", "ELETRO", "CASA"};
// Cities 0..5 form the coastal cluster, 6..11 the inland cluster.
const char* kCities[12] = {"PORTOLUZ",  "MARAVISTA", "BAIAZUL",    "COSTAVERDE",
                           "ILHASOL",   "PRAIALTA",  "CAMPOREAL",  "VALEDOURO",
                           "SERRANOVA", "PLANALTINA", "MATAGRANDE", "RIOCLARO"};
const char* kOpsInvest[4] = {"APORTE INVESTFUND", "APLICACAO CORRETORA",
                             "COMPRA TESOURADIR", "RESGATE FUNDOAZUL"};
const char* kOpsArrears[4] = {"PARCELA CREDIARIO", "TARIFA ATRASO",
                              "SAQUE CAIXAVINTE", "PAGAMENTO BOLETAO"};
const char* kWalletPrefix[3] = {"ZAPPAY", "GIROPAY", "MOBICASH"};
const char* kWalletWords[30] = {
    "JOGO",    "LANCHE",  "RIFA",    "CREDITO",    "BONUS",   "TOPUP",
    "PIXEL",   "ARCADE",  "STREAM",  "CLUBE",      "SORTEIO", "VAQUINHA",
    "DELIVERY", "CORRIDA", "BILHETE", "RECARGA",   "BRINDE",  "PROMO",
    "CUPOM",   "GIFT",    "SKIN",    "MOEDA",      "FICHA",   "ASSINATURA",
    "PODCAST", "EMOJI",   "STICKER", "AVATAR",     "TURBO",   "BOOST"};

constexpr int kCatCards[6] = {8, 12, 3, 5, 4, 6};
const char* kCatNames[6] = {"state", "occupation", "device_os",
                            "acquisition_channel", "plan_tier", "region"};
const char* kNumNames[24] = {
    "spend_sum_1m_a", "spend_sum_3m_a", "spend_sum_6m_a",
    "spend_sum_1m_b", "spend_sum_3m_b", "spend_sum_6m_b",
    "spend_sum_1m_c", "spend_sum_3m_c", "spend_sum_6m_c",
    "txn_count_1m_a", "txn_count_1m_b", "txn_count_1m_c",
    "txn_count_6m_a", "txn_count_6m_b", "txn_count_6m_c",
    "bureau_score",   "alt_signal",     "age_cyclic",
    "prod_f1",        "prod_f2",        "account_age_days",
    "avg_txn_amount_3m", "days_since_last_txn", "monthly_spend_var_6m"};

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

int month_key(core::Timestamp ts) {
  core::CivilDate c = core::civil_from_timestamp(ts);
  return c.year * 12 + (c.month - 1);
}

int days_in_month(int year, int month) {
  static const int d[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  if (month == 2) {
    bool leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
    return leap ? 29 : 28;
  }
  return d[month - 1];
}

core::Timestamp nth_month(core::Timestamp start, int k) {
  core::CivilDate c = core::civil_from_timestamp(start);
  int m0 = c.year * 12 + (c.month - 1) + k;
  return core::timestamp_from_civil(m0 / 12, m0 % 12 + 1, 1);
}

struct UserState {
  double premium_prob = 0.5;  // P(pick a high-group merchant) per A transaction
  int coastal = 1;            // realized city cluster, +1 coastal / -1 inland
  int style = 1;              // realized B operation style, +1 invest / -1 arrears
  double tau = 0.0;           // spend trend latent
  double z1 = 0.0;            // bureau latent
  double z3 = 0.0;            // interaction partner latent (tabular side)
  double u_cyc = 0.0;         // cyclic feature in log1p space
  double zp1 = 0.0, zp2 = 0.0;
  double bureau_feature = 0.0;
  double alt_feature = 0.0;
  double prod_f1 = 0.0, prod_f2 = 0.0;
  double salary_scale = 1.0;
  int home_city = 0;
  int extra_age_days = 0;
  std::array<int, 6> cats{};
  double logit_static = 0.0;  // all label terms except per-row noise
};

UserState make_user(const GeneratorConfig& cfg, int uid) {
  UserState u;
  rng::Stream ps(cfg.seed, "persona", uint64_t(uid));
  std::vector<double> z(size_t(cfg.persona_dim));
  for (double& x : z) x = ps.normal();
  u.premium_prob = sigmoid(1.2 * z[0]);
  u.z1 = z[1];
  u.z3 = z[3];
  u.tau = z[5];

  rng::Stream city(cfg.seed, "city", uint64_t(uid));
  bool is_coastal = city.bernoulli(sigmoid(1.5 * z[2]));
  u.coastal = is_coastal ? 1 : -1;
  u.home_city = int(is_coastal ? city.below(6) : 6 + city.below(6));

  rng::Stream style(cfg.seed, "style", uint64_t(uid));
  u.style = style.bernoulli(sigmoid(1.3 * z[4])) ? 1 : -1;

  rng::Stream cyc(cfg.seed, "cyclic", uint64_t(uid));
  u.u_cyc = cyc.uniform(0.0, 3.0);

  rng::Stream bureau(cfg.seed, "bureau", uint64_t(uid));
  u.bureau_feature = 650.0 + 80.0 * u.z1 + 36.0 * bureau.normal();

  rng::Stream alt(cfg.seed, "alt", uint64_t(uid));
  u.alt_feature = u.z3 + 0.3 * alt.normal();

  rng::Stream prod(cfg.seed, "product", uint64_t(uid));
  u.zp1 = prod.normal();
  u.zp2 = prod.normal();
  u.prod_f1 = u.zp1 + 0.15 * prod.normal();
  u.prod_f2 = u.zp2 + 0.15 * prod.normal();

  rng::Stream sal(cfg.seed, "salary", uint64_t(uid));
  u.salary_scale = std::exp(0.25 * sal.normal());

  rng::Stream acct(cfg.seed, "account", uint64_t(uid));
  u.extra_age_days = int(acct.below(2000));

  rng::Stream cats(cfg.seed, "categoricals", uint64_t(uid));
  for (int k = 0; k < 6; ++k) u.cats[size_t(k)] = int(cats.below(uint64_t(kCatCards[k]))) + 1;

  u.logit_static = kWMerchant * (2.0 * u.premium_prob - 1.0)
                 + kWBureau * u.z1
                 + kWStyle * double(u.style)
                 + kWTrend * u.tau
                 + kWCyclic * std::cos(2.0 * kPi * u.u_cyc)
                 + kWProduct * u.zp1 * u.zp2
                 + cfg.interaction_strength * kWInteraction * double(u.coastal) * u.z3;
  return u;
}

bool has_source(const GeneratorConfig& cfg, core::Source s) {
  return std::find(cfg.sources.begin(), cfg.sources.end(), s) != cfg.sources.end();
}

struct MonthCtx {
  int year, month, days, month_index;
  double season;  // multiplicative factor on spend magnitudes
  double drift_p; // probability a description uses the drifted vocabulary
};

int64_t cents(double amount) {
  return std::max<int64_t>(1, std::llround(amount * 100.0));
}

void gen_user_transactions(const GeneratorConfig& cfg, int uid, const UserState& u,
                           std::span<const MonthCtx> months, core::UserHistory& out) {
  int mid = int(months.size()) / 2;
  auto trend = [&](int m) { return std::exp(kTrendPerMonth * u.tau * double(m - mid)); };
  auto push = [&](int y, int mo, int day, int64_t amount_cents, std::string desc,
                  core::Source src) {
    out.transactions.push_back(core::Transaction{
        amount_cents, core::timestamp_from_civil(y, mo, day), std::move(desc), src});
  };

  if (has_source(cfg, core::Source::A)) {
    rng::Stream s(cfg.seed, "txn.a", uint64_t(uid));
    for (const MonthCtx& mc : months) {
      int n = s.poisson(kRateA);
      for (int k = 0; k < n; ++k) {
        int day = 1 + int(s.below(uint64_t(mc.days)));
        bool hi = s.bernoulli(u.premium_prob);
        int mi = int(s.below(12));
        std::string merchant = hi ? kGroupHi[mi] : kGroupLo[mi];
        if (mc.drift_p > 0.0 && s.bernoulli(mc.drift_p)) merchant += "NOVA";
        int city = s.bernoulli(0.8) ? u.home_city : int(s.below(12));
        bool refund = s.bernoulli(0.05);
        double amt = std::exp(s.normal(4.0, 0.7)) * mc.season * trend(mc.month_index);
        if (refund) {
          push(mc.year, mc.month, day, cents(amt), "ESTORNO " + merchant, core::Source::A);
        } else {
          push(mc.year, mc.month, day, -cents(amt),
               merchant + " " + kCatWords[mi % 6] + " " + kCities[city], core::Source::A);
        }
      }
    }
  }

  if (has_source(cfg, core::Source::B)) {
    rng::Stream s(cfg.seed, "txn.b", uint64_t(uid));
    for (const MonthCtx& mc : months) {
      int pay_day = 1 + int(s.below(5));
      double salary = 3000.0 * u.salary_scale * std::exp(0.1 * s.normal());
      push(mc.year, mc.month, pay_day, cents(salary), "SALARIO EMPREGADORA", core::Source::B);
      int n = s.poisson(kRateB);
      for (int k = 0; k < n; ++k) {
        int day = 1 + int(s.below(uint64_t(mc.days)));
        bool on_style = s.bernoulli(0.85);
        bool invest = (u.style > 0) == on_style;
        const char* op = invest ? kOpsInvest[s.below(4)] : kOpsArrears[s.below(4)];
        double amt = std::exp(s.normal(4.8, 0.9)) * trend(mc.month_index);
        push(mc.year, mc.month, day, -cents(amt), op, core::Source::B);
      }
      if (s.bernoulli(0.25)) {
        int day = 1 + int(s.below(uint64_t(mc.days)));
        double amt = std::exp(s.normal(5.2, 0.7));
        push(mc.year, mc.month, day, cents(amt), "TRANSFERENCIA RECEBIDA", core::Source::B);
      }
    }
  }

  if (has_source(cfg, core::Source::C)) {
    rng::Stream s(cfg.seed, "txn.c", uint64_t(uid));
    for (const MonthCtx& mc : months) {
      int n = s.poisson(kRateC);
      for (int k = 0; k < n; ++k) {
        int day = 1 + int(s.below(uint64_t(mc.days)));
        std::string word = kWalletWords[s.below(30)];
        if (mc.drift_p > 0.0 && s.bernoulli(mc.drift_p)) word += "NOVA";
        std::string desc = std::string(kWalletPrefix[s.below(3)]) + " " + word;
        double amt = std::exp(s.normal(2.2, 0.8)) * mc.season * trend(mc.month_index);
        if (s.bernoulli(0.1)) {
          push(mc.year, mc.month, day, cents(amt), "BONUS " + desc, core::Source::C);
        } else {
          push(mc.year, mc.month, day, -cents(amt), std::move(desc), core::Source::C);
        }
      }
    }
  }

  std::stable_sort(out.transactions.begin(), out.transactions.end(),
                   [](const core::Transaction& a, const core::Transaction& b) {
                     return a.date < b.date;
                   });
}

// Aggregates over [score_date - months, score_date).
struct Window {
  double spend[3] = {0, 0, 0};  // outflow magnitude per source, in currency units
  int count[3] = {0, 0, 0};
};

Window aggregate(const core::UserHistory& h, core::Timestamp score, int months_back) {
  core::CivilDate c = core::civil_from_timestamp(score);
  int m0 = c.year * 12 + (c.month - 1) - months_back;
  core::Timestamp lo = core::timestamp_from_civil(m0 / 12, m0 % 12 + 1, 1);
  Window w;
  for (const core::Transaction& t : h.transactions) {
    if (t.date < lo) continue;
    if (!(t.date < score)) break;
    int s = int(t.source);
    ++w.count[s];
    if (t.amount_cents < 0) w.spend[s] += double(-t.amount_cents) / 100.0;
  }
  return w;
}

core::TabularVector build_features(const GeneratorConfig& cfg, int uid, const UserState& u,
                                   const core::UserHistory& h, core::Timestamp score,
                                   int month_index) {
  core::TabularVector f;
  f.numericals.resize(24);
  f.categoricals.assign(u.cats.begin(), u.cats.end());

  Window w1 = aggregate(h, score, 1);
  Window w3 = aggregate(h, score, 3);
  Window w6 = aggregate(h, score, 6);
  auto set = [&](int idx, double v) { f.numericals[size_t(idx)] = {v, false}; };
  for (int s = 0; s < 3; ++s) {
    set(s * 3 + 0, w1.spend[s]);
    set(s * 3 + 1, w3.spend[s]);
    set(s * 3 + 2, w6.spend[s]);
    set(9 + s, double(w1.count[s]));
    set(12 + s, double(w6.count[s]));
  }
  set(15, u.bureau_feature);
  set(16, u.alt_feature);
  set(17, std::expm1(u.u_cyc));
  set(18, u.prod_f1);
  set(19, u.prod_f2);
  set(20, double((score.unix_seconds - cfg.start.unix_seconds) / 86400 + u.extra_age_days));

  int total3 = w3.count[0] + w3.count[1] + w3.count[2];
  double spend3 = w3.spend[0] + w3.spend[1] + w3.spend[2];
  set(21, total3 > 0 ? spend3 / total3 : 0.0);

  double days_since = 90.0;
  for (auto it = h.transactions.rbegin(); it != h.transactions.rend(); ++it) {
    if (it->date < score) {
      days_since = double((score.unix_seconds - it->date.unix_seconds) / 86400);
      break;
    }
  }
  set(22, days_since);

  double tot[6] = {0, 0, 0, 0, 0, 0};
  {
    core::CivilDate c = core::civil_from_timestamp(score);
    int mk_score = c.year * 12 + (c.month - 1);
    for (const core::Transaction& t : h.transactions) {
      if (!(t.date < score) || t.amount_cents >= 0) continue;
      int back = mk_score - month_key(t.date);
      if (back >= 1 && back <= 6) tot[back - 1] += double(-t.amount_cents) / 100.0;
    }
  }
  double mean = 0;
  for (double x : tot) mean += x / 6.0;
  double var = 0;
  for (double x : tot) var += (x - mean) * (x - mean) / 6.0;
  set(23, var);

  rng::Stream miss(cfg.seed, "missing", uint64_t(uid) * 4096 + uint64_t(month_index));
  if (miss.bernoulli(0.08)) f.numericals[15] = {0.0, true};
  if (miss.bernoulli(0.04)) f.numericals[16] = {0.0, true};
  return f;
}

}  // namespace

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCategory::kConfig, m); };
  if (n_users < 1) fail("n_users must be at least 1");
  if (!(start < end)) fail("date range start must precede end");
  core::CivilDate cs = core::civil_from_timestamp(start);
  core::CivilDate ce = core::civil_from_timestamp(end);
  if (cs.day != 1 || ce.day != 1 || start.unix_seconds % 86400 != 0 ||
      end.unix_seconds % 86400 != 0) {
    fail("date range bounds must be first-of-month dates");
  }
  if (sources.empty()) fail("at least one source required");
  for (size_t i = 0; i < sources.size(); ++i) {
    for (size_t j = i + 1; j < sources.size(); ++j) {
      if (sources[i] == sources[j]) fail("duplicate source in config");
    }
  }
  if (persona_dim < 6) fail("persona_dim must be at least 6");
  if (label_horizon_months < 1) fail("label_horizon_months must be at least 1");
  if (interaction_strength < 0) fail("interaction_strength must be nonnegative");
  if (seasonality_amplitude < 0 || seasonality_amplitude >= 0.95) {
    fail("seasonality_amplitude must be in [0, 0.95)");
  }
  if (positive_rate <= 0.01 || positive_rate >= 0.9) {
    fail("positive_rate must be in (0.01, 0.9)");
  }
  if (label_noise < 0) fail("label_noise must be nonnegative");
  if (n_train_rows < 1 || n_test_rows < 1) fail("row counts must be positive");
  if (train_months < 1 || test_months < 1) fail("month grids must be nonempty");
  if (drift_rate < 0) fail("drift_rate must be nonnegative");
  int total = month_key(end) - month_key(start);
  if (total < train_months + test_months + 6) {
    fail("date range too short: need 6 warm-up months before the score grid");
  }
}

core::Timestamp month_start_after(const GeneratorConfig& cfg, int months_after_start) {
  return nth_month(cfg.start, months_after_start);
}

Dataset generate(const GeneratorConfig& cfg) {
  cfg.validate();
  int total_months = month_key(cfg.end) - month_key(cfg.start);
  int first_test = total_months - cfg.test_months;
  int first_train = first_test - cfg.train_months;

  std::vector<MonthCtx> months(size_t(total_months));
  for (int m = 0; m < total_months; ++m) {
    core::CivilDate c = core::civil_from_timestamp(nth_month(cfg.start, m));
    double season =
        1.0 + cfg.seasonality_amplitude * std::cos(2.0 * kPi * double(c.month - 1) / 12.0);
    double drift_p = 0.0;
    if (cfg.drift_rate > 0.0 && m >= first_test) {
      drift_p = std::min(1.0, cfg.drift_rate * double(m - first_test + 1));
    }
    months[size_t(m)] = {c.year, c.month, days_in_month(c.year, c.month), m,
                         std::max(season, 0.05), drift_p};
  }

  Dataset ds;
  ds.histories.resize(size_t(cfg.n_users));
  std::vector<UserState> users(size_t(cfg.n_users));
  for (int i = 0; i < cfg.n_users; ++i) {
    users[size_t(i)] = make_user(cfg, i);
    char buf[16];
    std::snprintf(buf, sizeof buf, "u%06d", i);
    ds.histories[size_t(i)].user_id = buf;
    gen_user_transactions(cfg, i, users[size_t(i)], months, ds.histories[size_t(i)]);
  }

  ds.schema.numerical_names.assign(std::begin(kNumNames), std::end(kNumNames));
  ds.schema.categorical_names.assign(std::begin(kCatNames), std::end(kCatNames));
  ds.schema.categorical_cardinalities.assign(std::begin(kCatCards), std::end(kCatCards));

  struct Draft {
    int uid, month_index;
    double noise;    // label-noise draw, fixed per (user, month)
    double u_label;  // uniform used for the final Bernoulli
  };
  auto draw_row = [&](const char* stream, int r, int first_month, int span) {
    rng::Stream rs(cfg.seed, stream, uint64_t(r));
    Draft d;
    d.uid = int(rs.below(uint64_t(cfg.n_users)));
    d.month_index = first_month + int(rs.below(uint64_t(span)));
    rng::Stream ls(cfg.seed, "label", uint64_t(d.uid) * 4096 + uint64_t(d.month_index));
    d.noise = ls.normal();
    d.u_label = ls.uniform();
    return d;
  };

  std::vector<Draft> train(size_t(cfg.n_train_rows)), test(size_t(cfg.n_test_rows));
  for (int r = 0; r < cfg.n_train_rows; ++r) {
    train[size_t(r)] = draw_row("row.train", r, first_train, cfg.train_months);
  }
  for (int r = 0; r < cfg.n_test_rows; ++r) {
    test[size_t(r)] = draw_row("row.test", r, first_test, cfg.test_months);
  }

  auto row_logit = [&](const Draft& d) {
    return users[size_t(d.uid)].logit_static + cfg.label_noise * d.noise;
  };

  // Intercept calibrated so the mean train probability hits the target rate.
  double lo = -12.0, hi = 8.0;
  for (int it = 0; it < 60; ++it) {
    double mid = 0.5 * (lo + hi);
    double mean = 0;
    for (const Draft& d : train) mean += sigmoid(mid + row_logit(d));
    mean /= double(train.size());
    (mean < cfg.positive_rate ? lo : hi) = mid;
  }
  ds.intercept = 0.5 * (lo + hi);

  auto materialize = [&](const std::vector<Draft>& drafts, const char* prefix,
                         std::vector<core::LabeledRow>& out) {
    out.resize(drafts.size());
    for (size_t r = 0; r < drafts.size(); ++r) {
      const Draft& d = drafts[r];
      core::LabeledRow& row = out[r];
      char buf[16];
      std::snprintf(buf, sizeof buf, "%s%07zu", prefix, r);
      row.row_id = buf;
      row.user_id = ds.histories[size_t(d.uid)].user_id;
      row.score_date = nth_month(cfg.start, d.month_index);
      row.p_true = sigmoid(ds.intercept + row_logit(d));
      row.label = d.u_label < row.p_true ? 1 : 0;
      row.features = build_features(cfg, d.uid, users[size_t(d.uid)],
                                    ds.histories[size_t(d.uid)], row.score_date,
                                    d.month_index);
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const core::LabeledRow& a, const core::LabeledRow& b) {
                       return a.score_date < b.score_date;
                     });
  };
  materialize(train, "t", ds.train_rows);
  materialize(test, "e", ds.test_rows);
  return ds;
}

double bayes_reference_auc(std::span<const core::LabeledRow> rows) {
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(rows.size());
  labels.reserve(rows.size());
  for (const core::LabeledRow& r : rows) {
    if (r.p_true < 0) {
      throw Error(ErrorCategory::kData, "row lacks a retained true probability");
    }
    scores.push_back(r.p_true);
    labels.push_back(r.label);
  }
  return eval::auc(scores, labels);
}

std::array<double, 12> monthly_spend_shares(std::span<const core::UserHistory> histories) {
  std::array<double, 12> tot{};
  for (const core::UserHistory& h : histories) {
    for (const core::Transaction& t : h.transactions) {
      if (t.amount_cents >= 0) continue;
      core::CivilDate c = core::civil_from_timestamp(t.date);
      tot[size_t(c.month - 1)] += double(-t.amount_cents) / 100.0;
    }
  }
  double sum = 0;
  for (double x : tot) sum += x;
  if (sum > 0) {
    for (double& x : tot) x /= sum;
  }
  return tot;
}

core::UserHistory filter_sources(const core::UserHistory& h,
                                 std::span<const core::Source> keep) {
  core::UserHistory out;
  out.user_id = h.user_id;
  for (const core::Transaction& t : h.transactions) {
    if (std::find(keep.begin(), keep.end(), t.source) != keep.end()) {
      out.transactions.push_back(t);
    }
  }
  return out;
}

}  // namespace txnfm::synth
