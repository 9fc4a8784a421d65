#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sigver/corpus.hpp"
#include "sigver/embedview.hpp"
#include "sigver/error.hpp"
#include "sigver/hash.hpp"
#include "sigver/image_io.hpp"
#include "sigver/metrics.hpp"
#include "sigver/model_io.hpp"
#include "sigver/netspec.hpp"
#include "sigver/network.hpp"
#include "sigver/preproc.hpp"
#include "sigver/rng.hpp"
#include "sigver/svm.hpp"

namespace sigver {

// ---------------------------------------------------------------- configuration

struct ExperimentConfig {
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::string out_dir = "out";

  struct Corpus {
    std::string root;  // empty: synthesise into <out_dir>/corpus
    CorpusConfig synth;
  } corpus;

  struct Split {
    std::size_t exploitation = 10;
    std::size_t validation = 5;
  } split;

  PreprocConfig preproc;

  struct Net {
    Family family = Family::alexnet_reduced;
    std::size_t embedding_size = 1024;  // before width scaling
    double width_scale = 0.25;
    std::optional<std::size_t> first_conv_stride;
    std::string embedding_layer;  // empty: last embedding layer
    std::string expected_hash;    // empty: accept the model written by train-cnn
  } network;

  struct Train {
    TrainHyper hyper;
    std::size_t holdout_per_writer = 4;  // genuine samples per dev_train writer kept for accuracy logging
  } train;

  struct Wd {
    std::size_t r = 14;
    KernelKind kernel = KernelKind::rbf;
    double C = 1.0;
    double gamma = 0;  // <= 0: 1/(N var)
    std::size_t negatives = 14;
    std::string features = "cnn";  // or raw_pixels
  } wd;

  struct Eval {
    std::size_t runs = 10;
    std::size_t genuine_test = 10;
    std::size_t random_test = 10;
    std::size_t skilled_test = 30;
  } eval;

  struct Analyze {
    std::string set = "validation";  // or exploitation
    std::size_t grid_points = 512;
    TsneConfig tsne;
  } analyze;

  /// Desk-scale run: 35 synthetic writers at 34x48.
  static ExperimentConfig desk() {
    ExperimentConfig c;
    c.corpus.synth.users = 35;
    c.corpus.synth.writer.height = 130;
    c.corpus.synth.writer.width = 220;
    c.preproc.scale_factor = 0.2;
    c.network.first_conv_stride = 1;
    c.train.hyper.epochs = 15;
    return c;
  }

  /// The full-size protocol: 881 writers, 300 exploitation, 50 validation.
  static ExperimentConfig full() {
    ExperimentConfig c;
    c.corpus.synth.users = 881;
    c.corpus.synth.writer.height = 700;
    c.corpus.synth.writer.width = 1200;
    c.corpus.synth.writer.tremor = 10;
    c.split.exploitation = 300;
    c.split.validation = 50;
    c.network.family = Family::alexnet;
    c.network.embedding_size = 2048;
    c.network.width_scale = 1.0;
    c.train.holdout_per_writer = 0;
    c.train.hyper.epochs = 20;
    return c;
  }

  void validate() const {
    preproc.validate();
    train.hyper.validate();
    analyze.tsne.validate();
    require(eval.runs >= 1, Errc::InvalidArgument, "eval.runs must be >= 1");
    require(wd.r >= 1, Errc::InvalidArgument, "wd.r must be >= 1");
    require(wd.features == "cnn" || wd.features == "raw_pixels", Errc::InvalidArgument,
            "wd.features must be 'cnn' or 'raw_pixels'");
    require(analyze.set == "validation" || analyze.set == "exploitation", Errc::InvalidArgument,
            "analyze.set must be 'validation' or 'exploitation'");
    require(threads >= 1, Errc::InvalidArgument, "threads must be >= 1");
  }
};

namespace detail {

// Reads known keys from a section and rejects anything else.
struct Section {
  Section(const nlohmann::json& json, std::string section) : j(json), name(std::move(section)) {}

  const nlohmann::json& j;
  std::string name;
  std::set<std::string> seen;

  template <typename T>
  void get(const char* key, T& out) {
    seen.insert(key);
    if (j.contains(key)) {
      try {
        out = j.at(key).get<T>();
      } catch (const nlohmann::json::exception& e) {
        fail(Errc::InvalidArgument, "config " + name + "." + key + ": " + e.what());
      }
    }
  }
  const nlohmann::json* sub(const char* key) {
    seen.insert(key);
    return j.contains(key) ? &j.at(key) : nullptr;
  }
  void finish() const {
    require(j.is_object(), Errc::InvalidArgument, "config section " + name + " must be an object");
    for (const auto& [k, v] : j.items())
      require(seen.count(k) > 0, Errc::InvalidArgument, "unknown config key " + name + "." + k);
  }
};

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const auto& w = c.corpus.synth.writer;
  json net = {{"family", family_name(c.network.family)},
              {"embedding_size", c.network.embedding_size},
              {"width_scale", c.network.width_scale},
              {"embedding_layer", c.network.embedding_layer},
              {"expected_hash", c.network.expected_hash}};
  net["first_conv_stride"] = c.network.first_conv_stride ? json(*c.network.first_conv_stride) : json(nullptr);
  const auto& h = c.train.hyper;
  const auto& t = c.analyze.tsne;
  return {{"seed", c.seed},
          {"threads", c.threads},
          {"out_dir", c.out_dir},
          {"corpus",
           {{"root", c.corpus.root},
            {"users", c.corpus.synth.users},
            {"genuine_per_user", c.corpus.synth.genuine_per_user},
            {"skilled_per_user", c.corpus.synth.skilled_per_user},
            {"forgers_per_user", c.corpus.synth.forgers_per_user},
            {"writer",
             {{"strokes", w.strokes},
              {"control_points", w.control_points},
              {"jitter", w.jitter},
              {"tremor", w.tremor},
              {"skeleton_error", w.skeleton_error},
              {"height", w.height},
              {"width", w.width}}}}},
          {"split", {{"exploitation", c.split.exploitation}, {"validation", c.split.validation}}},
          {"preproc",
           {{"canvas_h", c.preproc.canvas_h},
            {"canvas_w", c.preproc.canvas_w},
            {"target_h", c.preproc.target_h},
            {"target_w", c.preproc.target_w},
            {"scale_factor", c.preproc.scale_factor}}},
          {"network", net},
          {"train",
           {{"learning_rate", h.learning_rate},
            {"momentum", h.momentum},
            {"batch_size", h.batch_size},
            {"epochs", h.epochs},
            {"lr_decay", h.lr_decay},
            {"holdout_per_writer", c.train.holdout_per_writer}}},
          {"wd",
           {{"r", c.wd.r},
            {"kernel", kernel_name(c.wd.kernel)},
            {"C", c.wd.C},
            {"gamma", c.wd.gamma},
            {"negatives", c.wd.negatives},
            {"features", c.wd.features}}},
          {"eval",
           {{"runs", c.eval.runs},
            {"genuine_test", c.eval.genuine_test},
            {"random_test", c.eval.random_test},
            {"skilled_test", c.eval.skilled_test}}},
          {"analyze",
           {{"set", c.analyze.set},
            {"grid_points", c.analyze.grid_points},
            {"tsne",
             {{"perplexity", t.perplexity},
              {"iterations", t.iterations},
              {"learning_rate", t.learning_rate},
              {"early_exaggeration", t.early_exaggeration},
              {"exaggeration_iterations", t.exaggeration_iterations},
              {"initial_momentum", t.initial_momentum},
              {"final_momentum", t.final_momentum},
              {"momentum_switch", t.momentum_switch},
              {"init_std", t.init_std}}}}}};
}

/// Overlays the keys present in `j` onto `base`; unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig c) {
  using detail::Section;
  Section top{j, "config"};
  if (const auto* p = top.sub("preset")) {
    const auto name = p->get<std::string>();
    if (name == "desk") c = ExperimentConfig::desk();
    else if (name == "full") c = ExperimentConfig::full();
    else fail(Errc::InvalidArgument, "unknown preset '" + name + "'");
  }
  top.get("seed", c.seed);
  top.get("threads", c.threads);
  top.get("out_dir", c.out_dir);
  if (const auto* s = top.sub("corpus")) {
    Section sec{*s, "corpus"};
    sec.get("root", c.corpus.root);
    sec.get("users", c.corpus.synth.users);
    sec.get("genuine_per_user", c.corpus.synth.genuine_per_user);
    sec.get("skilled_per_user", c.corpus.synth.skilled_per_user);
    sec.get("forgers_per_user", c.corpus.synth.forgers_per_user);
    if (const auto* ws = sec.sub("writer")) {
      Section w{*ws, "corpus.writer"};
      auto& p = c.corpus.synth.writer;
      w.get("strokes", p.strokes);
      w.get("control_points", p.control_points);
      w.get("jitter", p.jitter);
      w.get("tremor", p.tremor);
      w.get("skeleton_error", p.skeleton_error);
      w.get("height", p.height);
      w.get("width", p.width);
      w.finish();
    }
    sec.finish();
  }
  if (const auto* s = top.sub("split")) {
    Section sec{*s, "split"};
    sec.get("exploitation", c.split.exploitation);
    sec.get("validation", c.split.validation);
    sec.finish();
  }
  if (const auto* s = top.sub("preproc")) {
    Section sec{*s, "preproc"};
    sec.get("canvas_h", c.preproc.canvas_h);
    sec.get("canvas_w", c.preproc.canvas_w);
    sec.get("target_h", c.preproc.target_h);
    sec.get("target_w", c.preproc.target_w);
    sec.get("scale_factor", c.preproc.scale_factor);
    sec.finish();
  }
  if (const auto* s = top.sub("network")) {
    Section sec{*s, "network"};
    std::string fam(family_name(c.network.family));
    sec.get("family", fam);
    c.network.family = parse_family(fam);
    sec.get("embedding_size", c.network.embedding_size);
    sec.get("width_scale", c.network.width_scale);
    if (const auto* st = sec.sub("first_conv_stride")) {
      if (st->is_null()) c.network.first_conv_stride.reset();
      else c.network.first_conv_stride = st->get<std::size_t>();
    }
    sec.get("embedding_layer", c.network.embedding_layer);
    sec.get("expected_hash", c.network.expected_hash);
    sec.finish();
  }
  if (const auto* s = top.sub("train")) {
    Section sec{*s, "train"};
    auto& h = c.train.hyper;
    sec.get("learning_rate", h.learning_rate);
    sec.get("momentum", h.momentum);
    sec.get("batch_size", h.batch_size);
    sec.get("epochs", h.epochs);
    sec.get("lr_decay", h.lr_decay);
    sec.get("holdout_per_writer", c.train.holdout_per_writer);
    sec.finish();
  }
  if (const auto* s = top.sub("wd")) {
    Section sec{*s, "wd"};
    sec.get("r", c.wd.r);
    std::string k(kernel_name(c.wd.kernel));
    sec.get("kernel", k);
    c.wd.kernel = parse_kernel(k);
    sec.get("C", c.wd.C);
    sec.get("gamma", c.wd.gamma);
    sec.get("negatives", c.wd.negatives);
    sec.get("features", c.wd.features);
    sec.finish();
  }
  if (const auto* s = top.sub("eval")) {
    Section sec{*s, "eval"};
    sec.get("runs", c.eval.runs);
    sec.get("genuine_test", c.eval.genuine_test);
    sec.get("random_test", c.eval.random_test);
    sec.get("skilled_test", c.eval.skilled_test);
    sec.finish();
  }
  if (const auto* s = top.sub("analyze")) {
    Section sec{*s, "analyze"};
    sec.get("set", c.analyze.set);
    sec.get("grid_points", c.analyze.grid_points);
    if (const auto* ts = sec.sub("tsne")) {
      Section t{*ts, "analyze.tsne"};
      auto& p = c.analyze.tsne;
      t.get("perplexity", p.perplexity);
      t.get("iterations", p.iterations);
      t.get("learning_rate", p.learning_rate);
      t.get("early_exaggeration", p.early_exaggeration);
      t.get("exaggeration_iterations", p.exaggeration_iterations);
      t.get("initial_momentum", p.initial_momentum);
      t.get("final_momentum", p.final_momentum);
      t.get("momentum_switch", p.momentum_switch);
      t.get("init_std", p.init_std);
      t.finish();
    }
    sec.finish();
  }
  top.finish();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = ExperimentConfig::desk()) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::InvalidArgument, path.string() + ": " + e.what());
  }
  return config_from_json(j, std::move(base));
}

/// Hash of the result-determining settings; out_dir and threads are left out
/// so relocated or multi-threaded reruns report the same fingerprint.
inline std::string config_fingerprint(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("out_dir");
  j.erase("threads");
  return sha256_hex(j.dump());
}

// ---------------------------------------------------------------- stage errors

/// An Error annotated with the pipeline stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, Errc code, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)), code_(code) {}
  const std::string& stage() const noexcept { return stage_; }
  Errc code() const noexcept { return code_; }

 private:
  std::string stage_;
  Errc code_;
};

// ---------------------------------------------------------------- in-memory data

struct UserImages {
  std::string user_id;
  std::vector<GrayImage> genuine;
  std::vector<GrayImage> skilled;
};

struct UserFeatures {
  std::string user_id;
  std::vector<FeatureVector> genuine;
  std::vector<FeatureVector> skilled;
};

struct FeatureStore {
  std::string extractor_hash;
  std::string mode;
  std::string layer;
  std::size_t dim = 0;
  std::vector<UserFeatures> users;  // ascending user id

  const UserFeatures& user(const std::string& id) const {
    for (const auto& u : users)
      if (u.user_id == id) return u;
    fail(Errc::InvalidArgument, "feature store has no user " + id);
  }
};

inline std::string raw_pixel_hash(const PreprocConfig& p) {
  return sha256_hex("raw_pixels|" + std::to_string(p.scaled_target_h()) + "x" + std::to_string(p.scaled_target_w()));
}

inline FeatureVector raw_pixel_features(const GrayImage& img) {
  FeatureVector v(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) v[i] = img.pixels()[i] / 255.0;
  return v;
}

template <typename T>
Tensor<T> images_to_tensor(const std::vector<const GrayImage*>& imgs) {
  require(!imgs.empty(), Errc::InsufficientSamples, "no images");
  const auto h = static_cast<std::size_t>(imgs[0]->height()), w = static_cast<std::size_t>(imgs[0]->width());
  Tensor<T> t({imgs.size(), 1, h, w});
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    require(static_cast<std::size_t>(imgs[i]->height()) == h && static_cast<std::size_t>(imgs[i]->width()) == w,
            Errc::ShapeMismatch, "images differ in size");
    for (std::size_t p = 0; p < h * w; ++p) t[i * h * w + p] = static_cast<T>(imgs[i]->pixels()[p] / 255.0);
  }
  return t;
}

// ---------------------------------------------------------------- pipeline

class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg, std::ostream* log = &std::cerr) : cfg_(std::move(cfg)), log_(log) {
    cfg_.validate();
    out_ = cfg_.out_dir;
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const std::filesystem::path& out_dir() const noexcept { return out_; }

  std::filesystem::path corpus_root() const { return cfg_.corpus.root.empty() ? out_ / "corpus" : std::filesystem::path(cfg_.corpus.root); }
  std::filesystem::path preprocessed_root() const { return out_ / "preprocessed"; }
  std::filesystem::path model_path() const { return out_ / "cnn" / "model.json"; }
  std::filesystem::path model_hash_path() const { return out_ / "cnn" / "model.sha256"; }
  std::filesystem::path features_index_path() const { return out_ / "features" / "index.json"; }
  std::filesystem::path features_data_path() const { return out_ / "features" / "features.bin"; }
  std::filesystem::path wd_dir(std::size_t run) const { return out_ / "wd" / run_name(run); }
  std::filesystem::path scores_path(std::size_t run) const { return out_ / "scores" / (run_name(run) + ".json"); }
  std::filesystem::path report_json_path() const { return out_ / "report" / "report.json"; }
  std::filesystem::path report_text_path() const { return out_ / "report" / "report.txt"; }
  std::filesystem::path analysis_dir() const { return out_ / "analysis"; }

  // -------------------------------------------------------------- stages

  void synth() {
    stage("synth", [&] {
      if (!cfg_.corpus.root.empty()) {
        say("synth: using existing corpus at " + cfg_.corpus.root);
        return;
      }
      CorpusConfig cc = cfg_.corpus.synth;
      cc.seed = derive_seed(cfg_.seed, "corpus");
      cc.threads = cfg_.threads;
      const auto m = write_corpus(corpus_root(), cc);
      say("synth: wrote " + std::to_string(m.users.size()) + " users to " + corpus_root().string());
    });
  }

  void preprocess() {
    stage("preprocess", [&] {
      require_artifact(corpus_root(), "synth");
      const DatasetManifest m = load_manifest(corpus_root());
      const auto dst = preprocessed_root();
      DatasetManifest out;
      out.root = ".";
      out.users.resize(m.users.size());
      parallel_for(m.users.size(), cfg_.threads, [&](std::size_t i) {
        const UserEntry& u = m.users[i];
        UserEntry e{u.user_id, {}, {}};
        auto run = [&](const std::vector<std::string>& src, std::vector<std::string>& rels) {
          for (const auto& rel : src) {
            const auto in = std::filesystem::path(m.root) / rel;
            GrayImage img;
            try {
              img = sigver::preprocess(read_image(in), cfg_.preproc);
            } catch (const Error& err) {
              throw Error(err.code(), in.string() + ": " + err.what());
            }
            auto out_rel = std::filesystem::path(rel).replace_extension(".pgm").generic_string();
            write_pgm(dst / out_rel, img);
            rels.push_back(out_rel);
          }
        };
        run(u.genuine, e.genuine);
        run(u.skilled, e.skilled);
        out.users[i] = std::move(e);
      });
      write_file(dst / "manifest.json", to_json(out).dump(1) + "\n");
      say("preprocess: " + std::to_string(out.users.size()) + " users -> " + dst.string());
    });
  }

  std::vector<EpochLog> train_cnn() {
    std::vector<EpochLog> logs;
    stage("train-cnn", [&] {
      const auto users = load_preprocessed();
      const SplitPlan plan = split_plan(users);
      std::map<std::string, const UserImages*> by_id;
      for (const auto& u : users) by_id[u.user_id] = &u;

      std::vector<const GrayImage*> train_imgs, val_imgs;
      std::vector<int> train_y, val_y;
      Rng rng(derive_seed(cfg_.seed, "holdout"));
      for (std::size_t k = 0; k < plan.dev_train.size(); ++k) {
        const UserImages& u = *by_id.at(plan.dev_train[k]);
        std::vector<std::size_t> idx(u.genuine.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        const std::size_t hold = std::min(cfg_.train.holdout_per_writer, idx.size() > 1 ? idx.size() - 1 : 0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const bool held = i < hold;
          (held ? val_imgs : train_imgs).push_back(&u.genuine[idx[i]]);
          (held ? val_y : train_y).push_back(static_cast<int>(k));
        }
      }
      const auto spec = network_spec(plan.dev_train.size());
      Network<float> net(spec, derive_seed(cfg_.seed, "cnn-init"));
      net.set_threads(cfg_.threads);
      const Tensor<float> x = images_to_tensor<float>(train_imgs);
      const Tensor<float> xv = val_imgs.empty() ? Tensor<float>() : images_to_tensor<float>(val_imgs);
      TrainHyper hyper = cfg_.train.hyper;
      hyper.seed = derive_seed(cfg_.seed, "cnn-train");
      say("train-cnn: " + std::string(family_name(spec.family)) + ", " + std::to_string(plan.dev_train.size()) +
          " writers, " + std::to_string(train_imgs.size()) + " training images, " +
          std::to_string(val_imgs.size()) + " held out");
      std::ostringstream csv;
      csv << "epoch,learning_rate,train_loss,train_accuracy,dev_val_accuracy\n";
      logs = train_classifier<float>(net, x, train_y, hyper, val_imgs.empty() ? nullptr : &xv, val_y,
                                     [&](const EpochLog& l) {
                                       char buf[160];
                                       std::snprintf(buf, sizeof buf,
                                                     "train-cnn: epoch %zu lr %.5f loss %.4f train_acc %.3f "
                                                     "dev_val_acc %.3f",
                                                     l.epoch, l.learning_rate, l.train_loss, l.train_accuracy,
                                                     l.val_accuracy);
                                       say(buf);
                                       csv << l.epoch << ',' << l.learning_rate << ',' << l.train_loss << ','
                                           << l.train_accuracy << ',' << l.val_accuracy << '\n';
                                     });
      save_network(model_path(), net);
      const std::string hash = sha256_file(model_path());
      write_file(model_hash_path(), hash + "\n");
      write_file(out_ / "cnn" / "train_log.csv", csv.str());
      const double chance = 1.0 / static_cast<double>(plan.dev_train.size());
      write_file(out_ / "cnn" / "summary.json",
                 nlohmann::json{{"model_sha256", hash},
                                {"writers", plan.dev_train.size()},
                                {"chance_accuracy", chance},
                                {"final_dev_val_accuracy", logs.empty() ? -1.0 : logs.back().val_accuracy},
                                {"final_train_accuracy", logs.empty() ? -1.0 : logs.back().train_accuracy}}
                         .dump(1) +
                     "\n");
    });
    return logs;
  }

  void extract() {
    stage("extract", [&] {
      const auto users = load_preprocessed();
      FeatureStore store;
      store.mode = cfg_.wd.features;
      std::optional<Network<float>> net;
      if (store.mode == "cnn") {
        require_artifact(model_path(), "train-cnn");
        require_artifact(model_hash_path(), "train-cnn");
        store.extractor_hash = sha256_file(model_path());
        std::string recorded = read_file(model_hash_path());
        recorded.erase(recorded.find_last_not_of(" \n\r\t") + 1);
        require(recorded == store.extractor_hash, Errc::ModelMismatch,
                "model.json hash " + store.extractor_hash + " differs from the recorded " + recorded);
        require(cfg_.network.expected_hash.empty() || cfg_.network.expected_hash == store.extractor_hash,
                Errc::ModelMismatch,
                "CNN hash " + store.extractor_hash + " does not match network.expected_hash " +
                    cfg_.network.expected_hash);
        net = load_network<float>(model_path());
        net->set_threads(cfg_.threads);
        store.layer = embedding_layer(net->spec());
      } else {
        store.extractor_hash = raw_pixel_hash(cfg_.preproc);
        store.layer = "pixels";
      }
      for (const auto& u : users) {
        UserFeatures f{u.user_id, embed(net, store.layer, u.genuine), embed(net, store.layer, u.skilled)};
        store.users.push_back(std::move(f));
      }
      store.dim = store.users.front().genuine.front().size();
      save_features(store);
      say("extract: " + std::to_string(store.users.size()) + " users, " + std::to_string(store.dim) +
          "-d features from " + store.layer + " (" + store.extractor_hash.substr(0, 12) + ")");
    });
  }

  void train_wd() {
    stage("train-wd", [&] {
      const FeatureStore store = load_features();
      const SplitPlan plan = split_plan(store);
      std::vector<DevUser> pool;
      for (const auto& id : plan.development) pool.push_back({id, store.user(id).genuine});
      const std::set<std::string> exploit(plan.exploitation.begin(), plan.exploitation.end());
      std::vector<std::string> targets(plan.dev_val);
      targets.insert(targets.end(), plan.exploitation.begin(), plan.exploitation.end());

      SvmParams params;
      params.kind = cfg_.wd.kernel;
      params.C = cfg_.wd.C;
      params.gamma = cfg_.wd.gamma;
      WdSetOptions opts;
      opts.negatives = cfg_.wd.negatives;
      std::size_t unconverged = 0;
      for (std::size_t run = 0; run < cfg_.eval.runs; ++run) {
        const std::uint64_t run_seed = derive_seed(derive_seed(cfg_.seed, "wd"), run);
        std::vector<nlohmann::json> files(targets.size());
        std::vector<int> conv(targets.size(), 1);
        parallel_for(targets.size(), cfg_.threads, [&](std::size_t t) {
          const std::string& id = targets[t];
          const auto& uf = store.user(id);
          const auto set = build_wd_training_set(id, uf.genuine, cfg_.wd.r, pool, derive_seed(run_seed, id), opts,
                                                 &exploit);
          WdModel m = train_svm(set, params);
          m.extractor_hash = store.extractor_hash;
          conv[t] = m.converged;
          files[t] = {{"model", to_json(m)},
                      {"held_out", set.held_out_indices},
                      {"training_indices", set.positive_indices},
                      {"negative_users", set.negative_users},
                      {"duplication_factor", set.duplication_factor}};
        });
        for (std::size_t t = 0; t < targets.size(); ++t) {
          write_file(wd_dir(run) / (targets[t] + ".json"), files[t].dump() + "\n");
          unconverged += conv[t] == 0;
        }
      }
      if (unconverged) say("train-wd: warning: " + std::to_string(unconverged) + " SVMs hit the iteration cap");
      say("train-wd: " + std::to_string(cfg_.eval.runs) + " run(s) x " + std::to_string(targets.size()) +
          " users (r=" + std::to_string(cfg_.wd.r) + ", " + std::string(kernel_name(cfg_.wd.kernel)) + ")");
    });
  }

  EvalReport evaluate() {
    EvalReport report;
    stage("evaluate", [&] {
      const FeatureStore store = load_features();
      const SplitPlan plan = split_plan(store);
      std::vector<RunMetrics> runs;
      for (std::size_t run = 0; run < cfg_.eval.runs; ++run) {
        const auto val = score_group(store, plan.dev_val, run);
        const auto exp = score_group(store, plan.exploitation, run);
        const double threshold = select_validation_threshold(val);
        RunMetrics rm = evaluate_run(exp, threshold);
        runs.push_back(rm);
        nlohmann::json dump = {{"run", run},
                               {"threshold", threshold},
                               {"validation", scores_json(val)},
                               {"exploitation", scores_json(exp)},
                               {"validation_eer_user", 100 * eer_user(val)}};
        write_file(scores_path(run), dump.dump(1) + "\n");
      }
      report = aggregate_runs(runs);
      nlohmann::json j = to_json(report);
      j["extractor_hash"] = store.extractor_hash;
      j["features"] = store.mode;
      j["config_sha256"] = config_fingerprint(cfg_);
      write_file(report_json_path(), j.dump(1) + "\n");
      write_file(report_text_path(), format_table(report, "sigver evaluation (" + store.mode + " features)"));
      say("evaluate: EER_user " + fmt(report.eer_user.mean) + " +- " + fmt(report.eer_user.std) +
          " %, EER_user_random " + fmt(report.eer_user_random.mean) + " %, threshold from validation " +
          fmt(report.threshold.mean));
    });
    return report;
  }

  struct AnalysisSummary {
    double overlap_gg_gr = 0;
    double overlap_gg_gs = 0;
    double initial_kl = 0;
    double final_kl = 0;
    std::size_t points = 0;
  };

  AnalysisSummary analyze() {
    AnalysisSummary s;
    stage("analyze", [&] {
      const FeatureStore store = load_features();
      const SplitPlan plan = split_plan(store);
      const auto& ids = cfg_.analyze.set == "validation" ? plan.dev_val : plan.exploitation;
      std::vector<EmbeddedSample> samples;
      for (const auto& id : ids) {
        const auto& u = store.user(id);
        for (const auto& g : u.genuine) samples.push_back({id, SignatureLabel::genuine, g});
        for (const auto& f : u.skilled) samples.push_back({id, SignatureLabel::skilled_forgery, f});
      }
      const auto pop = distance_populations(samples);
      const auto curves = cumulative_curves(pop, default_grid(pop, cfg_.analyze.grid_points));
      s.overlap_gg_gr = curve_overlap(curves.distance, curves.gg_invcdf, curves.gr_cdf);
      s.overlap_gg_gs = curve_overlap(curves.distance, curves.gg_invcdf, curves.gs_cdf);
      write_file(analysis_dir() / "curves.csv", curves_csv(curves));

      std::vector<std::vector<double>> x;
      for (const auto& e : samples) x.push_back(e.features);
      TsneConfig tc = cfg_.analyze.tsne;
      tc.seed = derive_seed(cfg_.seed, "tsne");
      tc.threads = cfg_.threads;
      const double perp = std::min(tc.perplexity, (static_cast<double>(x.size()) - 1) / 3);
      const auto aff = tsne_calibrate(squared_distances(x), perp);
      const auto emb = tsne_embed(aff.joint, tc);
      s.initial_kl = emb.initial_kl;
      s.final_kl = emb.final_kl;
      s.points = samples.size();
      write_file(analysis_dir() / "tsne.csv", tsne_csv(samples, emb));
      write_file(analysis_dir() / "summary.json",
                 nlohmann::json{{"set", cfg_.analyze.set},
                                {"points", s.points},
                                {"pairs", {{"gg", pop.gg.size()}, {"gr", pop.gr.size()}, {"gs", pop.gs.size()}}},
                                {"overlap_gg_gr", s.overlap_gg_gr},
                                {"overlap_gg_gs", s.overlap_gg_gs},
                                {"tsne_perplexity", perp},
                                {"tsne_initial_kl", s.initial_kl},
                                {"tsne_final_kl", s.final_kl}}
                         .dump(1) +
                     "\n");
      say("analyze: overlap gg/gr " + fmt(s.overlap_gg_gr) + ", gg/gs " + fmt(s.overlap_gg_gs) + ", t-SNE KL " +
          fmt(s.initial_kl) + " -> " + fmt(s.final_kl));
    });
    return s;
  }

  void report() {
    stage("report", [&] {
      require_artifact(report_json_path(), "evaluate");
      const auto rep = nlohmann::json::parse(read_file(report_json_path()));
      std::string text = read_file(report_text_path());
      const auto cnn_summary = out_ / "cnn" / "summary.json";
      if (std::filesystem::exists(cnn_summary)) {
        const auto c = nlohmann::json::parse(read_file(cnn_summary));
        text += "CNN dev_val accuracy " + fmt(100 * c.at("final_dev_val_accuracy").get<double>()) + " % (chance " +
                fmt(100 * c.at("chance_accuracy").get<double>()) + " %)\n";
      }
      const auto an = analysis_dir() / "summary.json";
      if (std::filesystem::exists(an)) {
        const auto a = nlohmann::json::parse(read_file(an));
        text += "distance-curve overlap gg/gr " + fmt(a.at("overlap_gg_gr").get<double>()) + ", gg/gs " +
                fmt(a.at("overlap_gg_gs").get<double>()) + "\n";
      }
      text += "EER_user vs random forgeries " + fmt(rep.at("EER_user_random").at("mean").get<double>()) + " %\n";
      write_file(out_ / "report" / "summary.txt", text);
      write_artifact_manifest();
      if (log_) *log_ << text;
    });
  }

  /// All stages in order.
  EvalReport run_all() {
    write_file(out_ / "config.json", to_json(cfg_).dump(1) + "\n");
    synth();
    preprocess();
    if (cfg_.wd.features == "cnn") train_cnn();
    extract();
    train_wd();
    EvalReport rep = evaluate();
    analyze();
    report();
    return rep;
  }

  // -------------------------------------------------------------- loading

  std::vector<UserImages> load_preprocessed() const {
    require_artifact(preprocessed_root() / "manifest.json", "preprocess");
    const DatasetManifest m = manifest_from_json(nlohmann::json::parse(read_file(preprocessed_root() / "manifest.json")));
    std::vector<UserImages> users(m.users.size());
    parallel_for(m.users.size(), cfg_.threads, [&](std::size_t i) {
      users[i].user_id = m.users[i].user_id;
      for (const auto& r : m.users[i].genuine) users[i].genuine.push_back(read_pgm(preprocessed_root() / r));
      for (const auto& r : m.users[i].skilled) users[i].skilled.push_back(read_pgm(preprocessed_root() / r));
    });
    return users;
  }

  FeatureStore load_features() const {
    require_artifact(features_index_path(), "extract");
    require_artifact(features_data_path(), "extract");
    const auto j = nlohmann::json::parse(read_file(features_index_path()));
    const std::string bin = read_file(features_data_path());
    FeatureStore s;
    s.extractor_hash = j.at("extractor_hash").get<std::string>();
    s.mode = j.at("mode").get<std::string>();
    s.layer = j.at("layer").get<std::string>();
    s.dim = j.at("dim").get<std::size_t>();
    std::size_t off = 0;
    auto next = [&] {
      FeatureVector v(s.dim);
      require(off + s.dim * sizeof(double) <= bin.size(), Errc::Io, "features.bin is truncated");
      std::memcpy(v.data(), bin.data() + off, s.dim * sizeof(double));
      off += s.dim * sizeof(double);
      return v;
    };
    for (const auto& u : j.at("users")) {
      UserFeatures f;
      f.user_id = u.at("user_id").get<std::string>();
      for (std::size_t i = 0, n = u.at("genuine").get<std::size_t>(); i < n; ++i) f.genuine.push_back(next());
      for (std::size_t i = 0, n = u.at("skilled").get<std::size_t>(); i < n; ++i) f.skilled.push_back(next());
      s.users.push_back(std::move(f));
    }
    require(off == bin.size(), Errc::Io, "features.bin has trailing data");
    return s;
  }

  NetworkSpec network_spec(std::size_t classes) const {
    BuildOptions o;
    o.first_conv_stride = cfg_.network.first_conv_stride;
    return build_network(cfg_.network.family, cfg_.network.embedding_size, classes,
                         static_cast<std::size_t>(cfg_.preproc.scaled_target_h()),
                         static_cast<std::size_t>(cfg_.preproc.scaled_target_w()), cfg_.network.width_scale, o);
  }

 private:
  template <typename Fn>
  void stage(const std::string& name, Fn&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      throw StageError(name, e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      throw StageError(name, Errc::Io, std::string("malformed artifact: ") + e.what());
    } catch (const std::filesystem::filesystem_error& e) {
      throw StageError(name, Errc::Io, e.what());
    }
  }

  void say(const std::string& s) const {
    if (log_) *log_ << s << '\n';
  }

  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
  }

  static std::string run_name(std::size_t run) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "run_%02zu", run);
    return buf;
  }

  static void require_artifact(const std::filesystem::path& p, const std::string& producer) {
    require(std::filesystem::exists(p), Errc::MissingArtifact,
            p.string() + " not found; run `sigver " + producer + "` first");
  }

  template <typename Users>
  SplitPlan split_plan(const Users& users) const {
    std::vector<std::string> ids;
    for (const auto& u : users) ids.push_back(u.user_id);
    return split(std::move(ids), cfg_.split.exploitation, cfg_.split.validation);
  }
  SplitPlan split_plan(const FeatureStore& s) const { return split_plan(s.users); }

  std::string embedding_layer(const NetworkSpec& spec) const {
    if (!cfg_.network.embedding_layer.empty()) return cfg_.network.embedding_layer;
    return spec.embedding_layers().back();
  }

  std::vector<FeatureVector> embed(std::optional<Network<float>>& net, const std::string& layer,
                                   const std::vector<GrayImage>& imgs) const {
    std::vector<FeatureVector> out;
    if (!net) {
      for (const auto& g : imgs) out.push_back(raw_pixel_features(g));
      return out;
    }
    constexpr std::size_t batch = 64;
    for (std::size_t lo = 0; lo < imgs.size(); lo += batch) {
      std::vector<const GrayImage*> ptrs;
      for (std::size_t i = lo; i < std::min(imgs.size(), lo + batch); ++i) ptrs.push_back(&imgs[i]);
      const Tensor<float> e = net->extract_embedding(images_to_tensor<float>(ptrs), layer);
      const std::size_t d = e.dim(1);
      for (std::size_t b = 0; b < ptrs.size(); ++b)
        out.emplace_back(e.ptr() + b * d, e.ptr() + (b + 1) * d);
    }
    return out;
  }

  void save_features(const FeatureStore& s) const {
    nlohmann::json users = nlohmann::json::array();
    std::string bin;
    auto put = [&](const FeatureVector& v) {
      bin.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    };
    for (const auto& u : s.users) {
      users.push_back({{"user_id", u.user_id}, {"genuine", u.genuine.size()}, {"skilled", u.skilled.size()}});
      for (const auto& v : u.genuine) put(v);
      for (const auto& v : u.skilled) put(v);
    }
    write_file(features_data_path(), bin);
    write_file(features_index_path(), nlohmann::json{{"extractor_hash", s.extractor_hash},
                                                     {"mode", s.mode},
                                                     {"layer", s.layer},
                                                     {"dim", s.dim},
                                                     {"data_sha256", sha256_hex(bin)},
                                                     {"users", users}}
                                              .dump(1) +
                                          "\n");
  }

  /// Scores one group (validation or exploitation) for a run with the WD
  /// models on disk. Random forgeries are genuine signatures of other users
  /// in the same group.
  std::vector<UserScores> score_group(const FeatureStore& store, const std::vector<std::string>& ids,
                                      std::size_t run) const {
    std::vector<UserScores> out(ids.size());
    parallel_for(ids.size(), cfg_.threads, [&](std::size_t t) {
      const std::string& id = ids[t];
      const auto path = wd_dir(run) / (id + ".json");
      require_artifact(path, "train-wd");
      const auto j = nlohmann::json::parse(read_file(path));
      const WdModel m = wd_model_from_json(j.at("model"));
      const auto held = j.at("held_out").get<std::vector<std::size_t>>();
      const auto& uf = store.user(id);
      UserScores s;
      s.user_id = id;
      for (std::size_t i = 0; i < std::min(cfg_.eval.genuine_test, held.size()); ++i)
        s.genuine.push_back(score_checked(m, uf.genuine[held[i]], store.extractor_hash));
      for (std::size_t i = 0; i < std::min(cfg_.eval.skilled_test, uf.skilled.size()); ++i)
        s.skilled.push_back(score_checked(m, uf.skilled[i], store.extractor_hash));
      // one signature from each other user in turn, seeded per (run, user)
      std::vector<std::pair<std::size_t, std::size_t>> cands;
      Rng rng(derive_seed(derive_seed(derive_seed(cfg_.seed, "random-forgeries"), run), id));
      std::vector<std::size_t> others;
      for (std::size_t o = 0; o < ids.size(); ++o)
        if (o != t) others.push_back(o);
      std::shuffle(others.begin(), others.end(), rng);
      std::vector<std::vector<std::size_t>> orders(others.size());
      for (std::size_t k = 0; k < others.size(); ++k) {
        orders[k].resize(store.user(ids[others[k]]).genuine.size());
        std::iota(orders[k].begin(), orders[k].end(), std::size_t{0});
        std::shuffle(orders[k].begin(), orders[k].end(), rng);
      }
      for (std::size_t round = 0; cands.size() < cfg_.eval.random_test && !others.empty(); ++round) {
        bool any = false;
        for (std::size_t k = 0; k < others.size() && cands.size() < cfg_.eval.random_test; ++k)
          if (round < orders[k].size()) cands.emplace_back(others[k], orders[k][round]), any = true;
        if (!any) break;
      }
      for (const auto& [o, i] : cands)
        s.random.push_back(score_checked(m, store.user(ids[o]).genuine[i], store.extractor_hash));
      out[t] = std::move(s);
    });
    return out;
  }

  static nlohmann::json scores_json(const std::vector<UserScores>& users) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& u : users)
      a.push_back({{"user_id", u.user_id}, {"genuine", u.genuine}, {"skilled", u.skilled}, {"random", u.random}});
    return a;
  }

  void write_artifact_manifest() const {
    nlohmann::json files = nlohmann::json::array();
    std::vector<std::filesystem::path> paths;
    for (const auto& e : std::filesystem::recursive_directory_iterator(out_)) {
      if (!e.is_regular_file()) continue;
      const auto rel = std::filesystem::relative(e.path(), out_);
      const auto top = rel.begin()->string();
      if (top == "corpus" || top == "preprocessed" || rel == "artifacts.json") continue;
      paths.push_back(rel);
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& rel : paths) files.push_back({{"path", rel.generic_string()}, {"sha256", sha256_file(out_ / rel)}});
    std::filesystem::path corpus_manifest = preprocessed_root() / "manifest.json";
    nlohmann::json j = {{"files", files}};
    if (std::filesystem::exists(corpus_manifest)) j["preprocessed_manifest_sha256"] = sha256_file(corpus_manifest);
    write_file(out_ / "artifacts.json", j.dump(1) + "\n");
  }

  ExperimentConfig cfg_;
  std::ostream* log_;
  std::filesystem::path out_;
};

inline EvalReport run_experiment(const ExperimentConfig& cfg, std::ostream* log = &std::cerr) {
  Pipeline p(cfg, log);
  return p.run_all();
}

}  // namespace sigver
