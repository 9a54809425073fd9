#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "emm/dataset.hpp"

using namespace emm;

namespace {

ObservationalDataset tiny_binary() {
  ObservationalDataset d;
  d.x = Matrix(4, 2);
  d.x(0, 0) = 1.0;
  d.x(1, 0) = 0.0;
  d.x(2, 0) = 1.0;
  d.x(3, 0) = 0.0;
  d.x(0, 1) = 0.25;
  d.x(1, 1) = 0.5;
  d.x(2, 1) = 0.75;
  d.x(3, 1) = 1.0;
  d.exposure = {1.0, 1.0, 0.0, 0.0};
  d.outcome = {1.0, 0.0, 1.0, 0.0};
  d.covariate_names = {"x1", "x2"};
  d.outcome_kind = OutcomeKind::binary;
  return d;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& p) : path(p) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("dataset validation") {
  REQUIRE_NOTHROW(validate(tiny_binary()));

  SECTION("outcome length mismatch") {
    auto d = tiny_binary();
    d.outcome.pop_back();
    REQUIRE_THROWS(validate(d));
  }

  SECTION("exposure must be 0/1") {
    auto d = tiny_binary();
    d.exposure[0] = 0.5;
    REQUIRE_THROWS(validate(d));
  }

  SECTION("binary outcome must be 0/1") {
    auto d = tiny_binary();
    d.outcome[1] = 0.3;
    REQUIRE_THROWS(validate(d));
  }

  SECTION("continuous outcome may take any finite value") {
    auto d = tiny_binary();
    d.outcome_kind = OutcomeKind::continuous;
    d.outcome[1] = -3.7;
    REQUIRE_NOTHROW(validate(d));
  }

  SECTION("non-finite covariate") {
    auto d = tiny_binary();
    d.x(2, 1) = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS(validate(d));
  }
}

TEST_CASE("method names") {
  REQUIRE(std::string(method_name(IteMethod::grf)) == "grf");
  REQUIRE(std::string(method_name(IteMethod::bart)) == "bart");
  REQUIRE(std::string(method_name(IteMethod::bcf)) == "bcf");
}

TEST_CASE("csv round trip") {
  const auto d = tiny_binary();
  TempFile tmp("test_roundtrip.csv");
  write_csv(d, tmp.path);

  CsvSchema schema;
  schema.outcome = "outcome";
  schema.exposure = "exposure";
  const auto back = load_csv(tmp.path, schema);

  REQUIRE(back.n() == 4);
  REQUIRE(back.p() == 2);
  REQUIRE(back.covariate_names == d.covariate_names);
  REQUIRE(back.outcome_kind == OutcomeKind::binary);
  for (std::size_t i = 0; i < 4; ++i) {
    REQUIRE(back.outcome[i] == d.outcome[i]);
    REQUIRE(back.exposure[i] == d.exposure[i]);
    for (std::size_t j = 0; j < 2; ++j) REQUIRE(back.x(i, j) == d.x(i, j));
  }
}

TEST_CASE("csv schema handling") {
  TempFile tmp("test_schema.csv");
  {
    std::ofstream out(tmp.path);
    out << "y,z,a,b\n";
    out << "1,0,0.5,2\n0,1,1.5,3\n1,1,2.5,4\n0,0,3.5,5\n";
  }

  CsvSchema schema;
  schema.outcome = "y";
  schema.exposure = "z";

  SECTION("covariates default to every remaining column") {
    const auto d = load_csv(tmp.path, schema);
    REQUIRE(d.covariate_names == std::vector<std::string>{"a", "b"});
    REQUIRE(d.outcome_kind == OutcomeKind::binary);
  }

  SECTION("explicit covariate subset") {
    schema.covariates = {"b"};
    const auto d = load_csv(tmp.path, schema);
    REQUIRE(d.p() == 1);
    REQUIRE(d.x(0, 0) == 2.0);
  }

  SECTION("outcome kind override") {
    schema.outcome_kind_override = OutcomeKind::continuous;
    const auto d = load_csv(tmp.path, schema);
    REQUIRE(d.outcome_kind == OutcomeKind::continuous);
  }

  SECTION("missing column") {
    schema.exposure = "missing";
    REQUIRE_THROWS_WITH(load_csv(tmp.path, schema),
                        Catch::Matchers::ContainsSubstring("missing"));
  }

  SECTION("missing file") {
    REQUIRE_THROWS_WITH(load_csv("no_such_file.csv", schema),
                        Catch::Matchers::ContainsSubstring("no_such_file.csv"));
  }
}

TEST_CASE("csv rejects malformed input") {
  CsvSchema schema;
  schema.outcome = "y";
  schema.exposure = "z";

  SECTION("duplicate header") {
    TempFile tmp("test_dup.csv");
    {
      std::ofstream out(tmp.path);
      out << "y,z,a,a\n1,0,1,2\n";
    }
    REQUIRE_THROWS_WITH(load_csv(tmp.path, schema), Catch::Matchers::ContainsSubstring("duplicate"));
  }

  SECTION("non-numeric cell") {
    TempFile tmp("test_text.csv");
    {
      std::ofstream out(tmp.path);
      out << "y,z,a\n1,0,oops\n0,1,2\n";
    }
    REQUIRE_THROWS(load_csv(tmp.path, schema));
  }

  SECTION("ragged row") {
    TempFile tmp("test_ragged.csv");
    {
      std::ofstream out(tmp.path);
      out << "y,z,a\n1,0\n";
    }
    REQUIRE_THROWS(load_csv(tmp.path, schema));
  }
}

TEST_CASE("synthetic generation") {
  SyntheticSpec spec;
  spec.n = 4000;
  spec.p = 3;
  spec.prevalences = {0.5, 0.3, 0.7};
  spec.baseline_risk = 0.2;
  spec.covariate_effects = {0.1, 0.0, 0.0};
  spec.tau_rule = TauRule::modifier(0, 0.1, 0.4);
  spec.exposure_rate = 0.4;
  spec.seed = 77;

  SECTION("deterministic for a fixed seed") {
    const auto a = generate_synthetic(spec);
    const auto b = generate_synthetic(spec);
    REQUIRE(a.data.outcome == b.data.outcome);
    REQUIRE(a.data.exposure == b.data.exposure);
    REQUIRE(a.true_ites == b.true_ites);

    auto spec2 = spec;
    spec2.seed = 78;
    const auto c = generate_synthetic(spec2);
    REQUIRE(a.data.outcome != c.data.outcome);
  }

  SECTION("marginals track the configured rates") {
    const auto res = generate_synthetic(spec);
    const auto& d = res.data;
    REQUIRE(d.n() == 4000);
    REQUIRE(d.p() == 3);
    REQUIRE(d.covariate_names == std::vector<std::string>{"x1", "x2", "x3"});
    REQUIRE(d.exposure_name == "z");
    REQUIRE(d.outcome_name == "y");

    // binomial 3-sigma bands
    REQUIRE(mean(d.exposure) == Catch::Approx(0.4).margin(3.0 * std::sqrt(0.24 / 4000.0)));
    std::vector<double> x2(d.n());
    for (std::size_t i = 0; i < d.n(); ++i) x2[i] = d.x(i, 1);
    REQUIRE(mean(x2) == Catch::Approx(0.3).margin(3.0 * std::sqrt(0.21 / 4000.0)));
  }

  SECTION("true effects follow the modifier rule") {
    const auto res = generate_synthetic(spec);
    for (std::size_t i = 0; i < res.data.n(); ++i)
      REQUIRE(res.true_ites[i] == (res.data.x(i, 0) == 1.0 ? 0.4 : 0.1));
  }

  SECTION("constant rule gives constant effects") {
    auto s = spec;
    s.tau_rule = TauRule::constant(0.25);
    const auto res = generate_synthetic(s);
    for (double t : res.true_ites) REQUIRE(t == 0.25);
  }

  SECTION("confounding tilts exposure by the confounder") {
    auto s = spec;
    s.confounding_strength = 1.5;
    s.confounder = 1;
    const auto res = generate_synthetic(s);
    double z1 = 0.0, n1 = 0.0, z0 = 0.0, n0 = 0.0;
    for (std::size_t i = 0; i < res.data.n(); ++i) {
      if (res.data.x(i, 1) == 1.0) {
        z1 += res.data.exposure[i];
        n1 += 1.0;
      } else {
        z0 += res.data.exposure[i];
        n0 += 1.0;
      }
    }
    REQUIRE(z1 / n1 > z0 / n0 + 0.2);
  }

  SECTION("noiseless continuous outcome equals the linear predictor") {
    auto s = spec;
    s.outcome = OutcomeKind::continuous;
    s.noise_sd = 0.0;
    const auto res = generate_synthetic(s);
    for (std::size_t i = 0; i < res.data.n(); ++i) {
      const double expect = 0.2 + 0.1 * res.data.x(i, 0) +
                            res.true_ites[i] * res.data.exposure[i];
      REQUIRE(res.data.outcome[i] == Catch::Approx(expect).margin(1e-12));
    }
  }

  SECTION("impossible binary risks are rejected") {
    auto s = spec;
    s.baseline_risk = 0.9;  // 0.9 + 0.1 + 0.4 > 1 under x = 1, z = 1
    REQUIRE_THROWS_WITH(generate_synthetic(s), Catch::Matchers::ContainsSubstring("implied risks"));
  }

  SECTION("spec validation") {
    auto s = spec;
    s.prevalences = {0.5, 0.5};
    REQUIRE_THROWS(generate_synthetic(s));
    s = spec;
    s.exposure_rate = 1.0;
    REQUIRE_THROWS(generate_synthetic(s));
    s = spec;
    s.tau_rule = TauRule::modifier(5, 0.1, 0.2);
    REQUIRE_THROWS(generate_synthetic(s));
  }
}

TEST_CASE("descriptive summary") {
  SyntheticSpec spec;
  spec.n = 500;
  spec.p = 2;
  spec.prevalences = {0.5, 0.4};
  spec.baseline_risk = 0.3;
  spec.tau_rule = TauRule::constant(0.2);
  spec.seed = 5;
  const auto res = generate_synthetic(spec);

  const SummaryTable t = descriptive_summary(res.data);
  REQUIRE(t.n == 500);
  REQUIRE(t.stratified);
  REQUIRE(t.stratum_n[0] + t.stratum_n[1] == 500);
  REQUIRE(t.rows.size() == 3);  // exposure + 2 covariates
  REQUIRE(t.rows[0].name == "z");

  std::size_t exposed = 0;
  for (double z : res.data.exposure) exposed += z == 1.0 ? 1 : 0;
  REQUIRE(t.rows[0].overall.count == exposed);
  REQUIRE(t.rows[0].by_stratum[0].count + t.rows[0].by_stratum[1].count == exposed);

  const std::string text = t.render();
  REQUIRE(text.find("z") != std::string::npos);
  REQUIRE(text.find("x1") != std::string::npos);

  auto cont = res.data;
  cont.outcome_kind = OutcomeKind::continuous;
  REQUIRE_FALSE(descriptive_summary(cont).stratified);
}
