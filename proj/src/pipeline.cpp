#include "mvacon/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mvacon {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw std::invalid_argument("config: unknown key " + where + "." + it.key());
}

}  // namespace

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  PipelineConfig cfg;
  reject_unknown(j, {"channels", "mvacon", "lift", "head", "bev", "scene", "train"}, "$");
  cfg.channels = j.value("channels", cfg.channels);
  if (j.contains("mvacon")) {
    const json& m = j["mvacon"];
    reject_unknown(m, {"clusters", "heads", "clustering_op", "cross_level", "layers"}, "mvacon");
    cfg.mvacon.clusters = m.value("clusters", cfg.mvacon.clusters);
    cfg.mvacon.heads = m.value("heads", cfg.mvacon.heads);
    if (m.contains("clustering_op")) cfg.mvacon.op = clustering_op_from_string(m["clustering_op"]);
    cfg.mvacon.cross_level = m.value("cross_level", cfg.mvacon.cross_level);
    cfg.mvacon.layers = m.value("layers", cfg.mvacon.layers);
  }
  if (j.contains("lift")) {
    const json& l = j["lift"];
    reject_unknown(l, {"mode", "layers", "sample_points", "d", "D", "recontextualize_per_layer"}, "lift");
    if (l.contains("mode")) cfg.lift.mode = lift_mode_from_string(l["mode"]);
    cfg.lift.layers = l.value("layers", cfg.lift.layers);
    cfg.lift.sample_points = l.value("sample_points", cfg.lift.sample_points);
    cfg.lift.d = l.value("d", cfg.lift.d);
    cfg.lift.depth_levels = l.value("D", cfg.lift.depth_levels);
    cfg.lift.recontextualize_per_layer =
        l.value("recontextualize_per_layer", cfg.lift.recontextualize_per_layer);
  }
  if (j.contains("head")) {
    const json& h = j["head"];
    reject_unknown(h, {"queries", "layers", "classes", "lambda_cls", "lambda_box"}, "head");
    cfg.head.queries = h.value("queries", cfg.head.queries);
    cfg.head.layers = h.value("layers", cfg.head.layers);
    cfg.head.classes = h.value("classes", cfg.head.classes);
    cfg.head.lambda_cls = h.value("lambda_cls", cfg.head.lambda_cls);
    cfg.head.lambda_box = h.value("lambda_box", cfg.head.lambda_box);
  }
  if (j.contains("bev")) {
    const json& b = j["bev"];
    reject_unknown(b, {"nx", "nz", "x_bounds", "z_bounds", "pillar_count", "y_bounds"}, "bev");
    cfg.bev.nx = b.value("nx", cfg.bev.nx);
    cfg.bev.nz = b.value("nz", cfg.bev.nz);
    cfg.bev.pillar_count = b.value("pillar_count", cfg.bev.pillar_count);
    if (b.contains("x_bounds")) {
      cfg.bev.x_min = b["x_bounds"][0];
      cfg.bev.x_max = b["x_bounds"][1];
    }
    if (b.contains("z_bounds")) {
      cfg.bev.z_min = b["z_bounds"][0];
      cfg.bev.z_max = b["z_bounds"][1];
    }
    if (b.contains("y_bounds")) {
      cfg.bev.y_min = b["y_bounds"][0];
      cfg.bev.y_max = b["y_bounds"][1];
    }
  }
  if (j.contains("scene")) {
    const json& s = j["scene"];
    reject_unknown(s, {"cameras", "image_size", "objects", "classes", "seed", "range"}, "scene");
    cfg.scene.cameras = s.value("cameras", cfg.scene.cameras);
    if (s.contains("image_size")) {
      cfg.scene.image_w = s["image_size"][0];
      cfg.scene.image_h = s["image_size"][1];
    }
    cfg.scene.objects = s.value("objects", cfg.scene.objects);
    cfg.scene.classes = s.value("classes", cfg.scene.classes);
    cfg.scene.seed = s.value("seed", cfg.scene.seed);
    if (s.contains("range")) {
      const json& r = s["range"];
      reject_unknown(r, {"min", "max", "depth_min", "depth_max"}, "scene.range");
      if (r.contains("min")) cfg.scene.range.min = {r["min"][0], r["min"][1], r["min"][2]};
      if (r.contains("max")) cfg.scene.range.max = {r["max"][0], r["max"][1], r["max"][2]};
      cfg.scene.range.depth_min = r.value("depth_min", cfg.scene.range.depth_min);
      cfg.scene.range.depth_max = r.value("depth_max", cfg.scene.range.depth_max);
    }
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown(t, {"steps", "lr", "seed"}, "train");
    cfg.train.steps = t.value("steps", cfg.train.steps);
    cfg.train.lr = t.value("lr", cfg.train.lr);
    cfg.train.seed = t.value("seed", cfg.train.seed);
  }
  cfg.validate();
  return cfg;
}

PipelineConfig PipelineConfig::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json_text(ss.str());
}

std::string PipelineConfig::to_json_text() const {
  json j;
  j["channels"] = channels;
  j["mvacon"] = {{"clusters", mvacon.clusters},
                 {"heads", mvacon.heads},
                 {"clustering_op", to_string(mvacon.op)},
                 {"cross_level", mvacon.cross_level},
                 {"layers", mvacon.layers}};
  j["lift"] = {{"mode", to_string(lift.mode)},
               {"layers", lift.layers},
               {"sample_points", lift.sample_points},
               {"d", lift.d},
               {"D", lift.depth_levels},
               {"recontextualize_per_layer", lift.recontextualize_per_layer}};
  j["head"] = {{"queries", head.queries},
               {"layers", head.layers},
               {"classes", head.classes},
               {"lambda_cls", head.lambda_cls},
               {"lambda_box", head.lambda_box}};
  j["bev"] = {{"nx", bev.nx},
              {"nz", bev.nz},
              {"x_bounds", {bev.x_min, bev.x_max}},
              {"z_bounds", {bev.z_min, bev.z_max}},
              {"pillar_count", bev.pillar_count},
              {"y_bounds", {bev.y_min, bev.y_max}}};
  j["scene"] = {{"cameras", scene.cameras},
                {"image_size", {scene.image_w, scene.image_h}},
                {"objects", scene.objects},
                {"classes", scene.classes},
                {"seed", scene.seed},
                {"range",
                 {{"min", {scene.range.min.x, scene.range.min.y, scene.range.min.z}},
                  {"max", {scene.range.max.x, scene.range.max.y, scene.range.max.z}},
                  {"depth_min", scene.range.depth_min},
                  {"depth_max", scene.range.depth_max}}}};
  j["train"] = {{"steps", train.steps}, {"lr", train.lr}, {"seed", train.seed}};
  return j.dump(2);
}

uint64_t PipelineConfig::hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : to_json_text()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

void PipelineConfig::validate() const {
  if (channels < 1) throw std::invalid_argument("config: channels must be >= 1");
  mvacon.validate(channels);
  head.validate();
  scene.validate();
  if (lift.layers < 1 || lift.sample_points < 1 || lift.d < 1 || lift.depth_levels < 1)
    throw std::invalid_argument("config: lift sizes must be >= 1");
  if (bev.nx < 1 || bev.nz < 1 || bev.pillar_count < 1)
    throw std::invalid_argument("config: bev grid sizes must be >= 1");
  if (scene.objects > head.queries)
    throw std::invalid_argument("config: more scene objects than object queries");
  if (scene.classes > head.classes)
    throw std::invalid_argument("config: scene classes exceed head classes");
}

DetectionModel::DetectionModel(const PipelineConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.train.seed);
  const bool petr = cfg_.lift.mode == LiftConfig::Mode::kPetr;
  const int levels = petr ? 1 : 3;
  backbone_ = std::make_unique<ToyBackbone>(reg_, "backbone", cfg_.channels, levels, rng);
  mvacon_ = std::make_unique<MvACon>(reg_, "mvacon", cfg_.mvacon, cfg_.channels, levels, rng);
  grid_ = build_bev_grid(cfg_.bev);
  int qd;
  if (petr) {
    petr_ = std::make_unique<PetrLift>(reg_, "petr", cfg_.channels, cfg_.lift.depth_levels,
                                       cfg_.lift.d, rng);
    qd = cfg_.lift.d;
  } else {
    bev_encoder_ = std::make_unique<BevEncoder>(reg_, "encoder", cfg_.channels, cfg_.lift.layers,
                                                cfg_.lift.sample_points, cfg_.scene.cameras, levels,
                                                cfg_.bev.pillar_count, rng);
    bev_embed_ = reg_.create("bev.embed", {grid_.cell_count(), cfg_.channels},
                             InitScheme::kUniformFanIn, rng);
    qd = cfg_.channels;
  }
  decoder_ = std::make_unique<Decoder>(reg_, "decoder", qd, qd, cfg_.head.layers, rng);
  heads_ = std::make_unique<PredictHeads>(reg_, "head", qd, cfg_.head.queries, cfg_.head.classes, rng);
  obj_queries_ = reg_.create("queries.embed", {cfg_.head.queries, qd}, InitScheme::kUniformFanIn, rng);

  // spread the learned reference points over the BEV extent so every part of
  // the scene starts near some query
  Tensor ref;
  for (auto& p : reg_.items())
    if (p.name == "head.ref") ref = p.tensor;
  const int o = cfg_.head.queries;
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(o))));
  auto& rd = ref.mutable_data();
  for (int q = 0; q < o; ++q) {
    const int gx = q % side, gz = q / side;
    rd[static_cast<size_t>(q) * 3 + 0] =
        cfg_.bev.x_min + (gx + 0.5) * (cfg_.bev.x_max - cfg_.bev.x_min) / side;
    rd[static_cast<size_t>(q) * 3 + 1] = 0.5 * (cfg_.bev.y_min + cfg_.bev.y_max);
    rd[static_cast<size_t>(q) * 3 + 2] =
        cfg_.bev.z_min + (gz + 0.5) * (cfg_.bev.z_max - cfg_.bev.z_min) / side;
  }
}

std::vector<Pyramid> DetectionModel::contextualize(const std::vector<RenderedView>& views) {
  std::vector<Pyramid> raw;
  raw.reserve(views.size());
  for (const auto& v : views) {
    Tensor img = Tensor::from({v.h, v.w, 3}, v.rgb);
    raw.push_back(backbone_->forward(img));
  }
  return mvacon_->forward(raw);
}

Tensor DetectionModel::lift(const Scene& scene, const std::vector<Pyramid>& ctx,
                            std::vector<std::vector<DeformPoint>>* traces, int trace_query) {
  if (petr_) {
    std::vector<FeatureMap> fms;
    std::vector<Tensor> volumes;
    SceneRange range = scene.rig.range;
    range.depth_levels = cfg_.lift.depth_levels;
    for (size_t v = 0; v < ctx.size(); ++v) {
      const FeatureMap& fm = ctx[v][0];
      fms.push_back(fm);
      volumes.push_back(frustum_volume(scene.rig.cameras[v], fm.h, fm.w, range));
    }
    return petr_->forward(fms, volumes);
  }
  std::vector<std::pair<int, int>> level_hw;
  for (const auto& fm : ctx[0]) level_hw.emplace_back(fm.h, fm.w);
  ProjectionTable table = project_anchors(grid_, scene.rig, level_hw);
  return bev_encoder_->forward(
      bev_embed_, [&](int) -> const std::vector<Pyramid>& { return ctx; }, table, traces, trace_query);
}

ModelForward DetectionModel::forward(const Scene& scene, double t0, double t1, int trace_query) {
  if (static_cast<int>(scene.rig.cameras.size()) != cfg_.scene.cameras)
    throw std::invalid_argument("model: scene camera count does not match the config");
  ModelForward out;
  std::vector<RenderedView> frame1 = render(scene, t1);
  out.contextualized = contextualize(frame1);
  out.kv = lift(scene, out.contextualized, bev_encoder_ ? &out.traces : nullptr, trace_query);
  Tensor dec1 = decoder_->forward(obj_queries_, out.kv);

  std::vector<RenderedView> frame0 = render(scene, t0);
  std::vector<Pyramid> ctx0 = contextualize(frame0);
  Tensor kv0 = lift(scene, ctx0, nullptr, -1);
  Tensor dec0 = decoder_->forward(obj_queries_, kv0);

  out.det = heads_->forward(dec1, dec0);
  return out;
}

MatchResult DetectionModel::loss(const ModelForward& fwd, const Scene& scene, double t1) const {
  return match_and_loss(fwd.det, gt_at_time(scene, t1), cfg_.head);
}

Pyramid DetectionModel::view_pyramid(const Scene& scene, double t, int view) {
  std::vector<RenderedView> views = render(scene, t);
  Tensor img = Tensor::from({views[static_cast<size_t>(view)].h, views[static_cast<size_t>(view)].w, 3},
                            views[static_cast<size_t>(view)].rgb);
  return mvacon_->forward_view(backbone_->forward(img));
}

}  // namespace mvacon
