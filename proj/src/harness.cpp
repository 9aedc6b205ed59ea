#include "mvacon/harness.hpp"

#include <algorithm>
#include <chrono>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace mvacon {

namespace {

std::string hash_line(const PipelineConfig& cfg) {
  std::ostringstream s;
  s << "# config_hash=" << std::hex << std::setw(16) << std::setfill('0') << cfg.hash();
  return s.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

void echo_config(const PipelineConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_text(out_dir + "/config.json", cfg.to_json_text() + "\n");
}

Tensor random_leaf(Rng& rng, std::vector<int> shape, double lo = -1, double hi = 1) {
  int n = 1;
  for (int d : shape) n *= d;
  std::vector<double> vals(static_cast<size_t>(n));
  for (double& x : vals) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(vals), true);
}

}  // namespace

TrainResult cmd_train(const PipelineConfig& cfg, const std::string& out_dir) {
  echo_config(cfg, out_dir);
  Scene scene = generate_scene(cfg.scene, cfg.scene.seed);
  DetectionModel model(cfg);
  const double t0 = 0.0, t1 = 0.5;

  TrainResult res;
  res.csv_path = out_dir + "/metrics.csv";
  res.checkpoint_path = out_dir + "/model.ckpt";
  std::ofstream csv(res.csv_path);
  if (!csv) throw std::runtime_error("cannot write " + res.csv_path);
  csv << hash_line(cfg) << "\nstep,loss,box_err,cls_acc\n";
  csv.flush();

  for (int step = 1; step <= cfg.train.steps; ++step) {
    try {
      ModelForward fwd = model.forward(scene, t0, t1);
      MatchResult mr = model.loss(fwd, scene, t1);
      const double l = mr.loss.item();
      if (!std::isfinite(l)) throw std::runtime_error("non-finite loss");
      model.params().zero_grads();
      mr.loss.backward();
      model.params().sgd_step(cfg.train.lr);
      std::ostringstream line;
      line << step << ',' << l << ',' << mr.mean_center_err << ',' << mr.cls_acc << '\n';
      csv << line.str();  // one complete row per write
      csv.flush();
      res.losses.push_back(l);
      res.center_errs.push_back(mr.mean_center_err);
    } catch (const std::exception& e) {
      std::ostringstream diag;
      diag << "training aborted at step " << step << ": " << e.what() << "\n";
      for (const auto& p : model.params().items()) {
        double mx = 0;
        for (double x : p.tensor.data()) mx = std::max(mx, std::fabs(x));
        diag << p.name << " max|w|=" << mx << "\n";
      }
      write_text(out_dir + "/diagnostics.txt", diag.str());
      throw;
    }
  }
  // post-training evaluation
  ModelForward fwd = model.forward(scene, t0, t1);
  MatchResult mr = model.loss(fwd, scene, t1);
  res.final_best_center_err = mr.best_center_err;
  model.params().save(res.checkpoint_path);
  return res;
}

namespace {

// forward doubles the input but the backward pass claims a unit Jacobian
Tensor corrupted_double(const Tensor& a) {
  auto n = std::make_shared<detail::Node>();
  n->shape = a.shape();
  n->val.resize(a.data().size());
  for (size_t i = 0; i < n->val.size(); ++i) n->val[i] = 2.0 * a.data()[i];
  n->requires_grad = a.requires_grad();
  n->parents = {a.node()};
  auto raw = n.get();
  auto pa = a.node();
  n->backward_fn = [raw, pa]() {
    pa->ensure_grad();
    for (size_t i = 0; i < raw->grad.size(); ++i) pa->grad[i] += raw->grad[i];
  };
  return Tensor::wrap(n);
}

struct NamedCheck {
  std::string name;
  std::function<double()> run;
};

std::vector<NamedCheck> build_checks(bool plant_corruption) {
  std::vector<NamedCheck> checks;
  GradCheckOptions opts;
  opts.max_coords_per_param = 8;

  checks.push_back({"tensor.composite", [opts]() {
    Rng rng(101);
    Tensor a = random_leaf(rng, {3, 4});
    Tensor b = random_leaf(rng, {4, 5});
    Tensor gamma = random_leaf(rng, {5}, 0.5, 1.5);
    Tensor beta = random_leaf(rng, {5});
    Tensor probe = random_leaf(rng, {3, 5});
    auto f = [&]() {
      Tensor x = layer_norm(softmax_axis(matmul(a, b), 1), gamma, beta, 1e-5);
      return sum_all(mul(relu(x), probe));
    };
    return grad_check(f, {a, b, gamma, beta}, opts);
  }});

  for (ClusteringOp op : {ClusteringOp::kLinear, ClusteringOp::kMlp, ClusteringOp::kConv}) {
    checks.push_back({"mvacon." + to_string(op), [op, opts]() {
      Rng rng(102);
      ParamRegistry reg;
      ClusterConfig cc;
      cc.clusters = 3;
      cc.heads = 2;
      cc.layers = 1;
      cc.op = op;
      cc.cross_level = true;
      MvACon mva(reg, "m", cc, 4, 1, rng);
      for (auto& p : reg.items())
        for (double& x : p.tensor.mutable_data()) x += rng.uniform(-0.2, 0.2);
      FeatureMap fm;
      fm.h = 3;
      fm.w = 4;
      fm.c = 4;
      fm.tokens = random_leaf(rng, {12, 4});
      Tensor probe = random_leaf(rng, {12, 4});
      std::vector<Tensor> leaves = {fm.tokens};
      for (auto& p : reg.items()) leaves.push_back(p.tensor);
      auto f = [&]() {
        Pyramid out = mva.forward_view({fm});
        return sum_all(mul(out[0].tokens, probe));
      };
      return grad_check(f, leaves, opts);
    }});
  }

  checks.push_back({"lift.petr", [opts]() {
    Rng rng(103);
    ParamRegistry reg;
    PetrLift lift(reg, "p", 4, 2, 5, rng);
    for (auto& p : reg.items())
      for (double& x : p.tensor.mutable_data()) x += rng.uniform(-0.2, 0.2);
    FeatureMap fm;
    fm.h = 2;
    fm.w = 3;
    fm.c = 4;
    fm.tokens = random_leaf(rng, {6, 4});
    Tensor vol = random_leaf(rng, {2, 3, 8});
    Tensor probe = random_leaf(rng, {6, 5});
    std::vector<Tensor> leaves = {fm.tokens, vol};
    for (auto& p : reg.items()) leaves.push_back(p.tensor);
    auto f = [&]() { return sum_all(mul(lift.forward({fm}, {vol}), probe)); };
    return grad_check(f, leaves, opts);
  }});

  checks.push_back({"lift.encoder", [opts]() {
    Rng rng(104);
    ProjectionTable table;
    table.cells = 4;
    table.pillars = 2;
    table.views = 2;
    table.levels = 1;
    table.level_hw = {{6, 6}};
    table.entries.resize(static_cast<size_t>(4) * 2 * 2);
    for (auto& e : table.entries) {
      e.visible = rng.uniform() < 0.8;
      e.u = rng.uniform(0.4, 4.6);
      e.v = rng.uniform(0.4, 4.6);
    }
    ParamRegistry reg;
    BevEncoder enc(reg, "e", 4, 1, 2, 2, 1, 2, rng);
    for (auto& p : reg.items())
      for (double& x : p.tensor.mutable_data()) x += rng.uniform(-0.15, 0.15);
    std::vector<Pyramid> pyr(2);
    for (int v = 0; v < 2; ++v) {
      FeatureMap fm;
      fm.h = fm.w = 6;
      fm.c = 4;
      fm.tokens = random_leaf(rng, {36, 4});
      pyr[static_cast<size_t>(v)] = {fm};
    }
    Tensor bev = random_leaf(rng, {4, 4});
    Tensor probe = random_leaf(rng, {4, 4});
    std::vector<Tensor> leaves = {bev, pyr[0][0].tokens, pyr[1][0].tokens};
    for (auto& p : reg.items()) leaves.push_back(p.tensor);
    auto f = [&]() {
      Tensor out = enc.forward(bev, [&](int) -> const std::vector<Pyramid>& { return pyr; }, table);
      return sum_all(mul(out, probe));
    };
    return grad_check(f, leaves, opts);
  }});

  checks.push_back({"head.full", [opts]() {
    Rng rng(105);
    ParamRegistry reg;
    Decoder dec(reg, "d", 4, 5, 1, rng);
    PredictHeads heads(reg, "h", 4, 4, 2, rng);
    for (auto& p : reg.items())
      for (double& x : p.tensor.mutable_data()) x += rng.uniform(-0.2, 0.2);
    Tensor q = random_leaf(rng, {4, 4});
    Tensor kv = random_leaf(rng, {6, 5});
    Tensor kv2 = random_leaf(rng, {6, 5});
    std::vector<GtBox> gt = {{0, 0.4, 0.2, 1.5, 1.0, 1.0, 1.0, 0.6, 0.1, -0.1},
                             {1, -1.2, 0.1, 2.5, 0.9, 1.1, 0.8, -0.4, 0.0, 0.2}};
    HeadConfig hc;
    hc.queries = 4;
    hc.classes = 2;
    std::vector<Tensor> leaves = {q, kv, kv2};
    for (auto& p : reg.items()) leaves.push_back(p.tensor);
    auto f = [&]() {
      DetectionSet det = heads.forward(dec.forward(q, kv), dec.forward(q, kv2));
      return match_and_loss(det, gt, hc).loss;
    };
    return grad_check(f, leaves, opts);
  }});

  checks.push_back({"scene.backbone", [opts]() {
    Rng rng(106);
    ParamRegistry reg;
    ToyBackbone bb(reg, "b", 3, 2, rng);
    Tensor img = random_leaf(rng, {8, 8, 3}, 0, 1);
    Tensor probe0 = random_leaf(rng, {4, 3});
    Tensor probe1 = random_leaf(rng, {1, 3});
    std::vector<Tensor> leaves = {img};
    for (auto& p : reg.items()) leaves.push_back(p.tensor);
    auto f = [&]() {
      Pyramid pyr = bb.forward(img);
      return add(sum_all(mul(pyr[0].tokens, probe0)), sum_all(mul(pyr[1].tokens, probe1)));
    };
    return grad_check(f, leaves, opts);
  }});

  if (plant_corruption)
    checks.push_back({"plant.corrupted", [opts]() {
      Rng rng(107);
      Tensor a = random_leaf(rng, {3, 3});
      auto f = [&]() { return sum_all(corrupted_double(a)); };
      return grad_check(f, {a}, opts);
    }});

  return checks;
}

}  // namespace

GradCheckReport cmd_gradcheck(const std::string& only, bool plant_corruption) {
  GradCheckReport report;
  int matched = 0;
  for (const NamedCheck& check : build_checks(plant_corruption)) {
    if (!only.empty() && check.name.find(only) == std::string::npos) continue;
    ++matched;
    GradCheckEntry e;
    e.name = check.name;
    e.rel_err = check.run();
    e.ok = e.rel_err < 1e-4;
    report.entries.push_back(e);
  }
  if (matched == 0) throw std::invalid_argument("gradcheck: filter '" + only + "' matches nothing");
  report.ok = std::all_of(report.entries.begin(), report.entries.end(),
                          [](const GradCheckEntry& e) { return e.ok; });
  return report;
}

std::vector<BenchRow> cmd_bench(const PipelineConfig& cfg, const std::string& out_dir, int reps) {
  if (reps < 1) throw std::invalid_argument("bench: reps must be >= 1");
#if defined(__GLIBC__)
  // keep multi-megabyte tensor buffers in the heap arena: per-op mmap/munmap
  // page faulting otherwise dominates and hides the arithmetic scaling
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
  const int c = 32, m = 100;
  Rng rng(9);
  AttnParams params;
  params.heads = 4;
  auto mk = [&](std::vector<int> shape) {
    int n = 1;
    for (int d : shape) n *= d;
    std::vector<double> vals(static_cast<size_t>(n));
    for (double& x : vals) x = rng.uniform(-0.3, 0.3);
    return Tensor::from(std::move(shape), std::move(vals));
  };
  params.wq = mk({c, c});
  params.bq = mk({c});
  params.wk = mk({c, c});
  params.bk = mk({c});
  params.wv = mk({c, c});
  params.bv = mk({c});
  params.wo = mk({c, c});
  params.bo = mk({c});
  Tensor clusters = mk({m, c});

  std::vector<BenchRow> rows;
  for (int n : {1024, 2048, 4096, 8192}) {
    Tensor tokens = mk({n, c});
    for (const std::string& mech : {std::string("paca"), std::string("dense")}) {
      std::vector<double> times;
      for (int r = 0; r < reps; ++r) {
        const auto start = std::chrono::steady_clock::now();
        Tensor out = mech == "paca" ? paca_attend(tokens, clusters, params)
                                    : dense_attend(tokens, params);
        const auto stop = std::chrono::steady_clock::now();
        (void)out;
        times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
      }
      std::sort(times.begin(), times.end());
      BenchRow row;
      row.mechanism = mech;
      row.n = n;
      row.median_ms = times[times.size() / 2];
      rows.push_back(row);
    }
  }
  if (!out_dir.empty()) {
    echo_config(cfg, out_dir);
    std::ostringstream csv;
    csv << hash_line(cfg) << "\nmechanism,N,median_ms\n";
    for (const auto& r : rows) csv << r.mechanism << ',' << r.n << ',' << r.median_ms << '\n';
    write_text(out_dir + "/bench.csv", csv.str());
  }
  return rows;
}

std::vector<double> upsample_heatmap(const std::vector<double>& src, int sh, int sw, int dh, int dw) {
  std::vector<double> up(static_cast<size_t>(dh) * dw, 0.0);
  for (int y = 0; y < dh; ++y)
    for (int x = 0; x < dw; ++x) {
      const double fy = (y + 0.5) * sh / dh - 0.5;
      const double fx = (x + 0.5) * sw / dw - 0.5;
      const int y0 = static_cast<int>(std::floor(fy)), x0 = static_cast<int>(std::floor(fx));
      const double wy = fy - y0, wx = fx - x0;
      auto at = [&](int yy, int xx) {
        yy = std::clamp(yy, 0, sh - 1);
        xx = std::clamp(xx, 0, sw - 1);
        return src[static_cast<size_t>(yy) * sw + xx];
      };
      up[static_cast<size_t>(y) * dw + x] = (1 - wy) * (1 - wx) * at(y0, x0) +
                                            (1 - wy) * wx * at(y0, x0 + 1) +
                                            wy * (1 - wx) * at(y0 + 1, x0) + wy * wx * at(y0 + 1, x0 + 1);
    }
  double lo = up.empty() ? 0 : up[0], hi = lo;
  for (double v : up) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  // flat maps (up to interpolation round-off) have no contrast to show
  if (hi - lo <= 1e-12 * std::max({std::fabs(hi), std::fabs(lo), 1.0})) {
    std::fill(up.begin(), up.end(), 0.0);
  } else {
    for (double& v : up) v = (v - lo) / (hi - lo);
  }
  return up;
}

namespace {

void write_pgm16(const std::string& path, const std::vector<double>& img, int w, int h,
                 const std::string& comment) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P5\n" << comment << "\n" << w << " " << h << "\n65535\n";
  for (double v : img) {
    const int x = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    f.put(static_cast<char>((x >> 8) & 0xff));
    f.put(static_cast<char>(x & 0xff));
  }
}

}  // namespace

std::vector<std::string> cmd_viz_clusters(const PipelineConfig& cfg, const std::string& checkpoint,
                                          const std::string& out_dir) {
  echo_config(cfg, out_dir);
  Scene scene = generate_scene(cfg.scene, cfg.scene.seed);
  DetectionModel model(cfg);
  if (!checkpoint.empty()) model.params().load(checkpoint);
  std::vector<RenderedView> views = render(scene, 0.5);
  std::vector<std::string> paths;
  for (size_t v = 0; v < views.size(); ++v) {
    Tensor img = Tensor::from({views[v].h, views[v].w, 3}, views[v].rgb);
    Pyramid pyr = model.backbone().forward(img);
    std::vector<ClusterSet> sets = model.mvacon().cluster_sets(pyr);
    for (size_t l = 0; l < sets.size(); ++l) {
      const Tensor& assign = sets[l].assign;    // [N, M]
      const Tensor& clusters = sets[l].clusters;  // [M, c]
      const int n = assign.dim(0), m = assign.dim(1), ch = clusters.dim(1);
      std::vector<double> zsum(static_cast<size_t>(m), 0.0);
      for (int j = 0; j < m; ++j)
        for (int k = 0; k < ch; ++k) zsum[static_cast<size_t>(j)] += clusters.data()[static_cast<size_t>(j) * ch + k];
      std::vector<double> heat(static_cast<size_t>(n), 0.0);
      for (int t = 0; t < n; ++t)
        for (int j = 0; j < m; ++j)
          heat[static_cast<size_t>(t)] += assign.data()[static_cast<size_t>(t) * m + j] * zsum[static_cast<size_t>(j)];
      std::vector<double> up =
          upsample_heatmap(heat, pyr[l].h, pyr[l].w, views[v].h, views[v].w);
      std::ostringstream name;
      name << out_dir << "/clusters_view" << v << "_level" << l << ".pgm";
      write_pgm16(name.str(), up, views[v].w, views[v].h, hash_line(cfg));
      paths.push_back(name.str());
    }
  }
  return paths;
}

std::vector<std::string> cmd_viz_deform(const PipelineConfig& cfg, const std::string& checkpoint,
                                        int bev_cell, const std::string& out_dir) {
  if (cfg.lift.mode != LiftConfig::Mode::kBevformer)
    throw std::invalid_argument("viz-deform requires lift.mode = bevformer");
  echo_config(cfg, out_dir);
  Scene scene = generate_scene(cfg.scene, cfg.scene.seed);
  DetectionModel model(cfg);
  if (!checkpoint.empty()) model.params().load(checkpoint);
  const int cells = model.grid().cell_count();
  const int cell = bev_cell >= 0 ? bev_cell : cells / 2;
  if (cell >= cells) throw std::invalid_argument("viz-deform: BEV cell out of range");
  ModelForward fwd = model.forward(scene, 0.0, 0.5, cell);
  std::vector<std::string> paths;
  for (size_t layer = 0; layer < fwd.traces.size(); ++layer) {
    std::ostringstream csv;
    csv.precision(17);
    csv << hash_line(cfg) << "\nview,level,pillar,sample,u,v,weight\n";
    for (const DeformPoint& pt : fwd.traces[layer])
      csv << pt.view << ',' << pt.level << ',' << pt.pillar << ',' << pt.sample << ',' << pt.u << ','
          << pt.v << ',' << pt.weight << '\n';
    std::ostringstream name;
    name << out_dir << "/deform_layer" << layer << ".csv";
    write_text(name.str(), csv.str());
    paths.push_back(name.str());
  }
  return paths;
}

std::vector<std::string> cmd_scene_gen(const PipelineConfig& cfg, const std::string& out_dir) {
  echo_config(cfg, out_dir);
  Scene scene = generate_scene(cfg.scene, cfg.scene.seed);
  std::vector<std::string> paths;
  write_text(out_dir + "/rig.json", scene.rig.to_json_text() + "\n");
  paths.push_back(out_dir + "/rig.json");
  std::ostringstream gt;
  gt << "[\n";
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    const GtBox& b = scene.objects[i].box;
    gt << "  {\"cls\": " << b.cls << ", \"center\": [" << b.x << ", " << b.y << ", " << b.z
       << "], \"size\": [" << b.l << ", " << b.w << ", " << b.h << "], \"yaw\": " << b.yaw
       << ", \"velocity\": [" << b.vx << ", " << b.vz << "], \"intensity\": "
       << scene.objects[i].intensity << "}" << (i + 1 < scene.objects.size() ? "," : "") << "\n";
  }
  gt << "]\n";
  write_text(out_dir + "/gt.json", gt.str());
  paths.push_back(out_dir + "/gt.json");
  std::vector<RenderedView> views = render(scene, 0.0);
  for (size_t v = 0; v < views.size(); ++v) {
    std::ostringstream name;
    name << out_dir << "/view" << v << ".ppm";
    write_ppm(name.str(), views[v]);
    paths.push_back(name.str());
  }
  return paths;
}

}  // namespace mvacon
