#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "json.hpp"

#include "gem/errors.hpp"

namespace gem {

// Query token layout used by the synthetic task.
constexpr int kPadToken = 0;
constexpr int kBosToken = 1;
constexpr int kEosToken = 2;
constexpr int kNumClasses = 4;
inline int class_token(int cls) { return 3 + cls; }

struct TrainConfig {
  std::uint64_t seed = 7;
  int image_size = 128;
  int k = 8;        // gaze points per sample
  int grid = 16;    // correlation-map grid, image_size / 8
  int c1 = 64;      // 1/16-scale feature channels
  int c2 = 32;      // 1/8-scale
  int c3 = 16;      // 1/4-scale
  int text_dim = 64;
  int model_dim = 64;
  int node_dim = 64;
  int vocab = 16;
  int token_count = 4;
  int heads = 4;
  std::array<int, 4> enc_widths = {8, 16, 32, 64};
  double lr = 1e-3;
  int batch = 16;
  int epochs = 30;
  double alpha = 1.0;
  double beta = 0.1;
  int sinkhorn_iters = 20;
  double weight_decay = 0.0;
  std::string fusion_mode = "context";  // "context" | "addition"
  bool use_vbmatch = true;
  bool text_blind = false;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw DataError("config field \"" + field + "\": " + why);
    };
    if (image_size <= 0 || image_size % 16) fail("image_size", "must be positive and divisible by 16");
    if (grid != image_size / 8) fail("grid", "must equal image_size / 8");
    if (grid < 6) fail("grid", "must be >= 6 (6x6 crops need the room)");
    if (k < 2) fail("k", "must be >= 2");
    if (batch < 1) fail("batch", "must be >= 1");
    if (epochs < 0) fail("epochs", "must be >= 0");
    if (!(alpha >= 0.0)) fail("alpha", "must be >= 0");
    if (!(beta >= 0.0)) fail("beta", "must be >= 0");
    if (!(lr >= 0.0)) fail("lr", "must be >= 0");
    if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
    if (sinkhorn_iters < 1) fail("sinkhorn_iters", "must be >= 1");
    if (heads < 1) fail("heads", "must be >= 1");
    if (model_dim % heads) fail("model_dim", "must be divisible by heads");
    if (node_dim % heads) fail("node_dim", "must be divisible by heads");
    if (model_dim % 4) fail("model_dim", "must be divisible by 4 for the 2-D position embedding");
    if (text_dim % 2) fail("text_dim", "must be even for the 1-D position embedding");
    if (token_count < 3) fail("token_count", "must be >= 3 (BOS, class, EOS)");
    if (vocab < 3 + kNumClasses) fail("vocab", "must cover the reserved tokens");
    for (int wchan : enc_widths)
      if (wchan < 1) fail("enc_widths", "stage widths must be positive");
    if (c1 < 1 || c2 < 1 || c3 < 1) fail("c1/c2/c3", "channel counts must be positive");
  }
};

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"seed", c.seed},
                        {"image_size", c.image_size},
                        {"k", c.k},
                        {"grid", c.grid},
                        {"c1", c.c1},
                        {"c2", c.c2},
                        {"c3", c.c3},
                        {"text_dim", c.text_dim},
                        {"model_dim", c.model_dim},
                        {"node_dim", c.node_dim},
                        {"vocab", c.vocab},
                        {"token_count", c.token_count},
                        {"heads", c.heads},
                        {"enc_widths", c.enc_widths},
                        {"lr", c.lr},
                        {"batch", c.batch},
                        {"epochs", c.epochs},
                        {"alpha", c.alpha},
                        {"beta", c.beta},
                        {"sinkhorn_iters", c.sinkhorn_iters},
                        {"weight_decay", c.weight_decay},
                        {"fusion_mode", c.fusion_mode},
                        {"use_vbmatch", c.use_vbmatch},
                        {"text_blind", c.text_blind}};
}

// Missing keys keep their defaults; unknown keys are rejected by name.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("config: expected a JSON object");
  TrainConfig c;
  const nlohmann::json ref = config_to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!ref.contains(key)) throw DataError("config: unknown key \"" + key + "\"");
    (void)value;
  }
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("image_size")) c.image_size = j.at("image_size").get<int>();
    if (j.contains("k")) c.k = j.at("k").get<int>();
    if (j.contains("grid")) c.grid = j.at("grid").get<int>();
    if (j.contains("c1")) c.c1 = j.at("c1").get<int>();
    if (j.contains("c2")) c.c2 = j.at("c2").get<int>();
    if (j.contains("c3")) c.c3 = j.at("c3").get<int>();
    if (j.contains("text_dim")) c.text_dim = j.at("text_dim").get<int>();
    if (j.contains("model_dim")) c.model_dim = j.at("model_dim").get<int>();
    if (j.contains("node_dim")) c.node_dim = j.at("node_dim").get<int>();
    if (j.contains("vocab")) c.vocab = j.at("vocab").get<int>();
    if (j.contains("token_count")) c.token_count = j.at("token_count").get<int>();
    if (j.contains("heads")) c.heads = j.at("heads").get<int>();
    if (j.contains("enc_widths")) c.enc_widths = j.at("enc_widths").get<std::array<int, 4>>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("batch")) c.batch = j.at("batch").get<int>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
    if (j.contains("beta")) c.beta = j.at("beta").get<double>();
    if (j.contains("sinkhorn_iters")) c.sinkhorn_iters = j.at("sinkhorn_iters").get<int>();
    if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("fusion_mode")) c.fusion_mode = j.at("fusion_mode").get<std::string>();
    if (j.contains("use_vbmatch")) c.use_vbmatch = j.at("use_vbmatch").get<bool>();
    if (j.contains("text_blind")) c.text_blind = j.at("text_blind").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  if (c.fusion_mode != "context" && c.fusion_mode != "addition")
    throw DataError("config field \"fusion_mode\": must be \"context\" or \"addition\"");
  return c;
}

}  // namespace gem
