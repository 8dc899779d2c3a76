#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "uniclam/contrastive.hpp"

namespace uniclam {

enum class UnifiedMode { Joint, Sequential };

/// Every run hyperparameter with its desk-scale default. JSON round-trips
/// through from_json/to_json; unknown keys are rejected to catch sweep typos.
struct RunConfig {
    int layers = 4;        // K
    int hidden = 32;       // h
    int heads = 4;
    int proj_dim = 16;
    int patch_size = 4;
    int image_size = 32;
    int vocab_size = 64;
    int q_max = 12;
    int n_vision = 4;      // N_v
    int n_text = 2;        // N_t
    int mask_channels = 8;
    double tau = 0.1;
    double beta = 0.3;
    double lambda = 1e-3;
    double lr = 1e-3;
    double weight_decay = 5e-4;
    int batch = 16;
    int steps = 2000;
    std::uint64_t seed = 1;
    MaskSemantics mask_semantics = MaskSemantics::Occlude;
    MaskSource augmentation = MaskSource::Adversarial;
    SharingMode sharing = SharingMode::Gradual;
    UnifiedMode unified = UnifiedMode::Joint;
    int finetune_steps = 300;
    double finetune_lr = 1e-3;
    bool freeze_encoders = false;

    void validate() const {
        if (beta < 0.0 || beta > 1.0) fail("config: beta must lie in [0,1]");
        if (lambda < 0.0) fail("config: lambda must be >= 0");
        if (tau <= 0.0) fail("config: tau must be > 0");
        if (n_vision < 1 || n_text < 1) fail("config: mask counts must be >= 1");
        if (batch < 2) fail("config: batch must be >= 2");
        if (steps < 0 || finetune_steps < 0) fail("config: step counts must be >= 0");
        EncoderConfig ec = encoder_config();
        ec.validate();
    }

    EncoderConfig encoder_config() const {
        EncoderConfig c;
        c.layers = layers;
        c.hidden = hidden;
        c.heads = heads;
        c.patch_size = patch_size;
        c.vocab_size = vocab_size;
        c.q_max = q_max;
        c.proj_dim = proj_dim;
        c.image_size = image_size;
        return c;
    }

    MaskingConfig masking_config() const {
        MaskingConfig c;
        c.n_vision = n_vision;
        c.n_text = n_text;
        c.channels = mask_channels;
        c.hidden = hidden;
        c.heads = heads;
        return c;
    }

    static RunConfig from_json(const std::string& text);
    std::string to_json() const;
};

namespace detail {

inline std::string enum_str(MaskSemantics s) { return s == MaskSemantics::Occlude ? "occlude" : "keep"; }
inline std::string enum_str(MaskSource s) { return s == MaskSource::Adversarial ? "adversarial" : "random"; }
inline std::string enum_str(SharingMode s) {
    switch (s) {
        case SharingMode::Gradual: return "gradual";
        case SharingMode::Hard: return "hard";
        default: return "none";
    }
}
inline std::string enum_str(UnifiedMode s) { return s == UnifiedMode::Joint ? "joint" : "sequential"; }

}  // namespace detail

inline RunConfig RunConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        fail(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) fail("config: top level must be a JSON object");

    RunConfig c;
    auto get_enum = [&](const std::string& key, const std::vector<std::string>& allowed) {
        std::string v = j.at(key).get<std::string>();
        for (const auto& a : allowed)
            if (v == a) return v;
        fail("config: key '" + key + "' has unsupported value '" + v + "'");
        return std::string();
    };

    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        try {
            if (k == "K") c.layers = it.value().get<int>();
            else if (k == "h") c.hidden = it.value().get<int>();
            else if (k == "heads") c.heads = it.value().get<int>();
            else if (k == "proj_dim") c.proj_dim = it.value().get<int>();
            else if (k == "patch_size") c.patch_size = it.value().get<int>();
            else if (k == "image_size") c.image_size = it.value().get<int>();
            else if (k == "vocab_size") c.vocab_size = it.value().get<int>();
            else if (k == "q_max") c.q_max = it.value().get<int>();
            else if (k == "N_v") c.n_vision = it.value().get<int>();
            else if (k == "N_t") c.n_text = it.value().get<int>();
            else if (k == "mask_channels") c.mask_channels = it.value().get<int>();
            else if (k == "tau") c.tau = it.value().get<double>();
            else if (k == "beta") c.beta = it.value().get<double>();
            else if (k == "lambda") c.lambda = it.value().get<double>();
            else if (k == "lr") c.lr = it.value().get<double>();
            else if (k == "weight_decay") c.weight_decay = it.value().get<double>();
            else if (k == "batch") c.batch = it.value().get<int>();
            else if (k == "steps") c.steps = it.value().get<int>();
            else if (k == "seed") c.seed = it.value().get<std::uint64_t>();
            else if (k == "finetune_steps") c.finetune_steps = it.value().get<int>();
            else if (k == "finetune_lr") c.finetune_lr = it.value().get<double>();
            else if (k == "freeze_encoders") c.freeze_encoders = it.value().get<bool>();
            else if (k == "mask_semantics")
                c.mask_semantics = get_enum(k, {"occlude", "keep"}) == "occlude"
                                       ? MaskSemantics::Occlude
                                       : MaskSemantics::Keep;
            else if (k == "augmentation")
                c.augmentation = get_enum(k, {"adversarial", "random"}) == "adversarial"
                                     ? MaskSource::Adversarial
                                     : MaskSource::Random;
            else if (k == "sharing") {
                std::string v = get_enum(k, {"gradual", "hard", "none"});
                c.sharing = v == "gradual" ? SharingMode::Gradual
                                           : (v == "hard" ? SharingMode::Hard : SharingMode::None);
            } else if (k == "unified")
                c.unified = get_enum(k, {"joint", "sequential"}) == "joint" ? UnifiedMode::Joint
                                                                            : UnifiedMode::Sequential;
            else
                fail("config: unknown key '" + k + "'");
        } catch (const nlohmann::json::exception& e) {
            fail("config: bad value for key '" + k + "': " + e.what());
        }
    }
    c.validate();
    return c;
}

inline std::string RunConfig::to_json() const {
    nlohmann::json j;
    j["K"] = layers;
    j["h"] = hidden;
    j["heads"] = heads;
    j["proj_dim"] = proj_dim;
    j["patch_size"] = patch_size;
    j["image_size"] = image_size;
    j["vocab_size"] = vocab_size;
    j["q_max"] = q_max;
    j["N_v"] = n_vision;
    j["N_t"] = n_text;
    j["mask_channels"] = mask_channels;
    j["tau"] = tau;
    j["beta"] = beta;
    j["lambda"] = lambda;
    j["lr"] = lr;
    j["weight_decay"] = weight_decay;
    j["batch"] = batch;
    j["steps"] = steps;
    j["seed"] = seed;
    j["mask_semantics"] = detail::enum_str(mask_semantics);
    j["augmentation"] = detail::enum_str(augmentation);
    j["sharing"] = detail::enum_str(sharing);
    j["unified"] = detail::enum_str(unified);
    j["finetune_steps"] = finetune_steps;
    j["finetune_lr"] = finetune_lr;
    j["freeze_encoders"] = freeze_encoders;
    return j.dump(2);
}

}  // namespace uniclam
