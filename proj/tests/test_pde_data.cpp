#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "flexi/pde_data.hpp"

using namespace flexi;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("burgers closed form") {
  SUBCASE("zero at x=0") {
    CHECK(burgers_exact(0.0, 0.0, 400.0) == 0.0);
    CHECK(burgers_exact(0.0, 1.7, 2399.0) == 0.0);
  }
  SUBCASE("golden values from a 50-digit evaluation") {
    // x=0.5, t=0, Re=400: denominator is exactly t+1 + e^{-25} e^{+25} = 2
    CHECK(burgers_exact(0.5, 0.0, 400.0) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(burgers_exact(0.5, 1.0, 800.0) ==
          doctest::Approx(0.24999999999754493518).epsilon(1e-14));
    CHECK(burgers_exact(0.25, 2.0, 1200.0) ==
          doctest::Approx(1.0 / 12.0).epsilon(1e-14));
    CHECK(burgers_exact(0.125, 0.5, 2400.0) ==
          doctest::Approx(1.0 / 12.0).epsilon(1e-14));
    CHECK(burgers_exact(0.9, 0.5, 600.0) ==
          doctest::Approx(9.4272910890903369357e-20).epsilon(1e-13));
  }
  SUBCASE("single interior maximum over a dense scan") {
    for (double re : {400.0, 1200.0, 2400.0}) {
      for (double t : {0.0, 1.0, 2.0}) {
        int sign_changes = 0;
        double prev = burgers_exact(1e-4, t, re) - burgers_exact(0.0, t, re);
        for (int i = 1; i < 10000; ++i) {
          double a = burgers_exact(static_cast<double>(i) * 1e-4, t, re);
          double b = burgers_exact(static_cast<double>(i + 1) * 1e-4, t, re);
          double d = b - a;
          if (d * prev < 0.0) ++sign_changes;
          if (d != 0.0) prev = d;
        }
        CHECK(sign_changes == 1);  // rises then falls exactly once
      }
    }
  }
  SUBCASE("bounds 0 <= u <= x/(t+1)") {
    Rng rng(5);
    for (int i = 0; i < 2000; ++i) {
      double x = rng.uniform(0.0, 1.0), t = rng.uniform(0.0, 4.0),
             re = rng.uniform(400.0, 2400.0);
      double u = burgers_exact(x, t, re);
      CHECK(u >= 0.0);
      CHECK(u <= x / (t + 1.0) + 1e-15);
    }
  }
  SUBCASE("no overflow at extreme exponents") {
    CHECK(std::isfinite(burgers_exact(1.0, 0.0, 1e6)));
    CHECK(burgers_exact(1.0, 0.0, 1e6) >= 0.0);
  }
  SUBCASE("nonpositive Re rejected") {
    CHECK_THROWS_AS(burgers_exact(0.5, 0.0, 0.0), std::domain_error);
    CHECK_THROWS_AS(burgers_exact(0.5, 0.0, -1.0), std::domain_error);
  }
}

TEST_CASE("advection-diffusion closed form") {
  SUBCASE("peak value 1/(4 pi nu t) at the advected center") {
    double re = 10.0, t = 0.6, nu = 1.0 / re;
    CHECK(advdiff_exact(t, 0.0, t, re, 1.0) ==
          doctest::Approx(1.0 / (4.0 * M_PI * nu * t)).epsilon(1e-15));
    CHECK(advdiff_exact(0.6, 0.0, 0.6, 10.0, 1.0) ==
          doctest::Approx(1.3262911924324611805).epsilon(1e-14));
    CHECK(advdiff_exact(0.3, 0.4, 0.5, 5.0, 1.0) ==
          doctest::Approx(0.48266176315026951092).epsilon(1e-14));
    CHECK(advdiff_exact(-1.0, 1.0, 0.2, 1.0, 1.0) ==
          doctest::Approx(0.018843517290913519707).epsilon(1e-14));
  }
  SUBCASE("symmetric in y") {
    Rng rng(7);
    for (int i = 0; i < 500; ++i) {
      double x = rng.uniform(-2.0, 2.0), y = rng.uniform(-2.0, 2.0),
             t = rng.uniform(0.05, 1.0), re = rng.uniform(1.0, 10.0);
      CHECK(advdiff_exact(x, y, t, re, 1.0) == advdiff_exact(x, -y, t, re, 1.0));
    }
  }
  SUBCASE("strictly positive") {
    CHECK(advdiff_exact(-2.0, 2.0, 0.05, 1.0, 1.0) > 0.0);
  }
  SUBCASE("grid quadrature mass close to 1 at small nu t") {
    AdvDiffConfig cfg;
    cfg.nx = cfg.ny = 128;
    for (double re : {1.0, 5.0, 10.0}) {
      double t = 0.1 * re <= 0.6 ? 0.1 * re : 0.6;  // keep nu t <= 0.1, peak in-domain
      Tensor u = snapshot(cfg, t, re);
      double mass = 0.0;
      for (int64_t iy = 0; iy < cfg.ny; ++iy)
        for (int64_t ix = 0; ix < cfg.nx; ++ix) {
          double wgt = ((ix == 0 || ix == cfg.nx - 1) ? 0.5 : 1.0) *
                       ((iy == 0 || iy == cfg.ny - 1) ? 0.5 : 1.0);
          mass += wgt * u.data[static_cast<size_t>(iy * cfg.nx + ix)];
        }
      mass *= cfg.dx() * cfg.dy();
      CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
    }
  }
  SUBCASE("invalid arguments rejected") {
    CHECK_THROWS_AS(advdiff_exact(0.0, 0.0, 0.0, 1.0, 1.0), std::domain_error);
    CHECK_THROWS_AS(advdiff_exact(0.0, 0.0, -0.5, 1.0, 1.0), std::domain_error);
    CHECK_THROWS_AS(advdiff_exact(0.0, 0.0, 0.5, 0.0, 1.0), std::domain_error);
  }
}

TEST_CASE("snapshots") {
  SUBCASE("burgers grid includes x=0 with zero value") {
    BurgersConfig cfg;
    Tensor u = snapshot(cfg, 1.0, 800.0);
    CHECK(u.shape == Shape{128});
    CHECK(u.data[0] == 0.0);
  }
  SUBCASE("burgers right boundary nearly zero at large Re") {
    BurgersConfig cfg;
    Tensor u = snapshot(cfg, 0.0, 2400.0);
    CHECK(std::abs(u.data.back()) < 1e-6);
  }
  SUBCASE("advdiff argmax lands on the grid point nearest (c t, 0)") {
    AdvDiffConfig cfg;
    cfg.nx = cfg.ny = 65;  // odd count so y=0 is a grid row, avoiding a tie
    for (double t : {0.2, 0.6, 1.1}) {
      Tensor u = snapshot(cfg, t, 5.0);
      size_t arg = 0;
      for (size_t i = 1; i < u.data.size(); ++i)
        if (u.data[i] > u.data[arg]) arg = i;
      int64_t iy = static_cast<int64_t>(arg) / cfg.nx;
      int64_t ix = static_cast<int64_t>(arg) % cfg.nx;
      int64_t want_ix = static_cast<int64_t>(
          std::llround((cfg.c * t - cfg.domain_lo) / cfg.dx()));
      int64_t want_iy = static_cast<int64_t>(std::llround(-cfg.domain_lo / cfg.dy()));
      CHECK(ix == want_ix);
      CHECK(iy == want_iy);
    }
  }
}

TEST_CASE("dataset construction") {
  BurgersConfig cfg;
  cfg.n = 32;  // keep the unit test light
  SUBCASE("cardinality K*J*I") {
    auto one = build_dataset(cfg, 1, 1, 1, 9);
    CHECK(one.size() == 1);
    auto many = build_dataset(cfg, 3, 4, 5, 9);
    CHECK(many.size() == 60);
  }
  SUBCASE("sampled values respect configured ranges") {
    auto recs = build_dataset(cfg, 5, 5, 5, 11);
    for (const auto& r : recs) {
      CHECK(r.tau >= 150 * cfg.dt);
      CHECK(r.tau <= 450 * cfg.dt);
      CHECK(r.zeta >= 400.0);
      CHECK(r.zeta <= 2400.0);
      CHECK(r.t >= 0.0);
      CHECK(r.t <= 2.0);
    }
  }
  SUBCASE("u_future regenerates bit-exactly from (t, tau, zeta)") {
    auto recs = build_dataset(cfg, 2, 2, 2, 13);
    for (const auto& r : recs) {
      Tensor again = snapshot(cfg, r.t + r.tau, r.zeta);
      CHECK(again.data == r.u_future.data);
    }
  }
  SUBCASE("same seed gives byte-identical dataset files") {
    namespace fs = std::filesystem;
    std::string f1 = (fs::temp_directory_path() / "ds_a.fvds").string();
    std::string f2 = (fs::temp_directory_path() / "ds_b.fvds").string();
    save_dataset(f1, cfg.to_json(), build_dataset(cfg, 3, 3, 3, 17));
    save_dataset(f2, cfg.to_json(), build_dataset(cfg, 3, 3, 3, 17));
    CHECK(slurp(f1) == slurp(f2));
    save_dataset(f2, cfg.to_json(), build_dataset(cfg, 3, 3, 3, 18));
    CHECK(slurp(f1) != slurp(f2));
    fs::remove(f1);
    fs::remove(f2);
  }
  SUBCASE("invalid cardinalities rejected") {
    CHECK_THROWS_AS(build_dataset(cfg, 0, 1, 1, 1), ConfigError);
  }
}

TEST_CASE("dataset split") {
  BurgersConfig cfg;
  cfg.n = 16;
  SUBCASE("degenerate spread puts everything in train plus interpolation") {
    std::vector<TupleRecord> recs;
    for (int i = 0; i < 50; ++i) {
      TupleRecord r;
      r.t = 1.0;
      r.tau = 0.8;
      r.zeta = 1000.0;
      r.i = static_cast<uint32_t>(i);
      r.u_now = r.u_future = Tensor::zeros({4});
      recs.push_back(r);
    }
    DatasetSplit s = split_dataset(recs, 0.7, 3);
    CHECK(s.val_left_extrap.empty());
    CHECK(s.val_right_extrap.empty());
    CHECK(s.train.size() + s.val_interp.size() == 50);
  }
  SUBCASE("record below both bounds goes to left extrapolation") {
    auto recs = build_dataset(cfg, 8, 8, 4, 21);
    TupleRecord low;
    low.t = 0.0;
    low.tau = 0.001;
    low.zeta = 1.0;
    low.u_now = low.u_future = recs[0].u_now;
    recs.push_back(low);
    DatasetSplit s = split_dataset(recs, 0.7, 3);
    bool found = false;
    for (const auto& r : s.val_left_extrap)
      if (r.zeta == 1.0) found = true;
    CHECK(found);
  }
  SUBCASE("partition is disjoint and exhaustive") {
    auto recs = build_dataset(cfg, 10, 5, 4, 23);
    DatasetSplit s = split_dataset(recs, 0.7, 29);
    CHECK(s.train.size() + s.val_interp.size() + s.val_left_extrap.size() +
              s.val_right_extrap.size() ==
          recs.size());
    std::vector<std::array<uint32_t, 3>> keys;
    for (const auto* zone : {&s.train, &s.val_interp, &s.val_left_extrap,
                             &s.val_right_extrap})
      for (const auto& r : *zone) keys.push_back({r.k, r.j, r.i});
    std::sort(keys.begin(), keys.end());
    CHECK(std::adjacent_find(keys.begin(), keys.end()) == keys.end());
    // every record remains inside the correct box classification
    for (const auto& r : s.train) {
      CHECK(r.zeta >= s.re_lo);
      CHECK(r.zeta <= s.re_hi);
      CHECK(r.t + r.tau >= s.tplus_lo);
      CHECK(r.t + r.tau <= s.tplus_hi);
    }
    // zone counts stable under the same seed
    DatasetSplit s2 = split_dataset(recs, 0.7, 29);
    CHECK(s2.train.size() == s.train.size());
    CHECK(s2.val_interp.size() == s.val_interp.size());
  }
  SUBCASE("train fraction roughly honored inside the box") {
    auto recs = build_dataset(cfg, 12, 6, 4, 31);
    DatasetSplit s = split_dataset(recs, 0.7, 37);
    double in_box = static_cast<double>(s.train.size() + s.val_interp.size());
    double frac = static_cast<double>(s.train.size()) / in_box;
    CHECK(frac > 0.55);
    CHECK(frac < 0.85);
  }
  SUBCASE("too few records rejected") {
    auto recs = build_dataset(cfg, 1, 1, 1, 1);
    CHECK_THROWS_AS(split_dataset(recs, 0.7, 1), ConfigError);
  }
}

TEST_CASE("finite-difference residual oracle") {
  SUBCASE("burgers snapshots satisfy the PDE on a fine grid") {
    BurgersConfig cfg;
    cfg.n = 512;
    double dt = 1e-4;
    // Evaluated once the exponential front has left [0, L]; at earlier
    // times the front width ~4 sqrt(t+1)/Re is below any practical grid
    // resolution and the check is discretization-limited.
    double t = 3.2;
    for (double re : {400.0, 1200.0, 2400.0}) {
      std::vector<Tensor> snaps = {snapshot(cfg, t - dt, re), snapshot(cfg, t, re),
                                   snapshot(cfg, t + dt, re)};
      double r = burgers_residual(snaps, dt, cfg.dx(), 1.0 / re);
      CHECK(r < 1e-2);
    }
  }
  SUBCASE("advdiff snapshots satisfy the PDE") {
    AdvDiffConfig cfg;
    cfg.nx = cfg.ny = 256;
    double dt = 1e-4, t = 0.6;
    for (double re : {1.0, 5.0, 10.0}) {
      std::vector<Tensor> snaps = {snapshot(cfg, t - dt, re), snapshot(cfg, t, re),
                                   snapshot(cfg, t + dt, re)};
      double r = advdiff_residual(snaps, dt, cfg.dx(), cfg.dy(), 1.0 / re, cfg.c);
      CHECK(r < 1e-2);
    }
  }
  SUBCASE("zero field has zero residual") {
    std::vector<Tensor> snaps(3, Tensor::zeros({8, 8}));
    CHECK(advdiff_residual(snaps, 0.1, 0.1, 0.1, 0.5, 1.0) == 0.0);
  }
  SUBCASE("fewer than 3 snapshots rejected") {
    std::vector<Tensor> snaps(2, Tensor::zeros({8}));
    CHECK_THROWS_AS(burgers_residual(snaps, 0.1, 0.1, 0.5), UsageError);
  }
}

TEST_CASE("dataset file round-trip") {
  namespace fs = std::filesystem;
  SUBCASE("burgers records survive bit-exactly") {
    BurgersConfig cfg;
    cfg.n = 24;
    auto recs = build_dataset(cfg, 2, 3, 2, 41);
    std::string file = (fs::temp_directory_path() / "roundtrip.fvds").string();
    save_dataset(file, cfg.to_json(), recs);
    DatasetFile back = load_dataset(file);
    CHECK(back.config["pde"] == "burgers");
    CHECK(BurgersConfig::from_json(back.config).n == 24);
    REQUIRE(back.records.size() == recs.size());
    for (size_t i = 0; i < recs.size(); ++i) {
      CHECK(back.records[i].t == recs[i].t);
      CHECK(back.records[i].tau == recs[i].tau);
      CHECK(back.records[i].zeta == recs[i].zeta);
      CHECK(back.records[i].u_now.data == recs[i].u_now.data);
      CHECK(back.records[i].u_future.data == recs[i].u_future.data);
      CHECK(back.records[i].k == recs[i].k);
    }
    fs::remove(file);
  }
  SUBCASE("advdiff records keep their 2-d shape") {
    AdvDiffConfig cfg;
    cfg.nx = 8;
    cfg.ny = 8;
    auto recs = build_dataset(cfg, 1, 2, 2, 43);
    std::string file = (fs::temp_directory_path() / "roundtrip2d.fvds").string();
    save_dataset(file, cfg.to_json(), recs);
    DatasetFile back = load_dataset(file);
    CHECK(back.records[0].u_now.shape == Shape{8, 8});
    CHECK(back.records[0].u_now.data == recs[0].u_now.data);
    fs::remove(file);
  }
  SUBCASE("bad magic rejected") {
    std::string file = (fs::temp_directory_path() / "notfvds.bin").string();
    std::ofstream(file) << "NOPE";
    CHECK_THROWS_AS(load_dataset(file), UsageError);
    fs::remove(file);
  }
}
