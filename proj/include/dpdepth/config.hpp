#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpdepth/loss.hpp"
#include "dpdepth/model.hpp"
#include "dpdepth/optim.hpp"
#include "dpdepth/sim.hpp"

// Run configuration: one flat "key = value" namespace covering the model,
// simulator, optimizer, loss, and paths. Sourced from a config file plus
// command-line overrides (later assignments win). Unknown keys are rejected,
// and every run echoes the fully resolved configuration.

namespace dpdepth {

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const int n = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: " + key + " wants an integer, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const unsigned long long n = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(n);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: " + key + " wants a non-negative integer, got '" + v + "'");
    }
}

inline Real parse_real(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const Real r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: " + key + " wants a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::invalid_argument("config: " + key + " wants true/false, got '" + v + "'");
}

/// Accepts hyphens or underscores interchangeably in enum spellings.
inline std::string normalize_word(std::string v) {
    for (char& c : v)
        if (c == '-') c = '_';
    return v;
}

}  // namespace detail

struct RunConfig {
    ModelConfig model;
    SimConfig sim;
    OptimConfig optim;
    LossConfig loss;

    // trainer schedule: 0 means "use `steps`"
    int stage1_steps = 0;
    int stage2_steps = 0;
    int stage3_steps = 0;
    int log_every = 10;

    // paths and synthesis
    std::string data;      // dataset manifest (stages 1 and 3, eval)
    std::string rgb_data;  // stage-2 manifest; empty means same as data
    std::string out = ".";
    std::string ckpt;
    int n = 16;  // synth sample count

    bool rgb_channels_explicit = false;

    void set(const std::string& key, const std::string& raw) {
        using namespace detail;
        const std::string v = trim(raw);
        if (key == "height") model.height = parse_int(key, v);
        else if (key == "width") model.width = parse_int(key, v);
        else if (key == "base_channels") model.base_channels = parse_int(key, v);
        else if (key == "rgb_channels") {
            std::vector<int> cs;
            std::stringstream ss(v);
            std::string item;
            while (std::getline(ss, item, ',')) cs.push_back(parse_int(key, trim(item)));
            model.rgb_channels = cs;
            rgb_channels_explicit = true;
        }
        else if (key == "dp_depth") model.dp_depth = parse_int(key, v);
        else if (key == "window_k") model.window_k = parse_int(key, v);
        else if (key == "axis") {
            const std::string w = normalize_word(v);
            if (w == "vertical") model.axis = Axis::vertical;
            else if (w == "horizontal") model.axis = Axis::horizontal;
            else throw std::invalid_argument("config: axis must be vertical or horizontal, got '" + v + "'");
        }
        else if (key == "wbipam_mode") {
            const std::string w = normalize_word(v);
            if (w == "full") model.wbipam_mode = WbipamMode::full;
            else if (w == "no_window") model.wbipam_mode = WbipamMode::no_window;
            else if (w == "unidirectional") model.wbipam_mode = WbipamMode::unidirectional;
            else if (w == "disabled") model.wbipam_mode = WbipamMode::disabled;
            else throw std::invalid_argument("config: wbipam_mode must be full/no_window/unidirectional/disabled, got '" + v + "'");
        }
        else if (key == "scaled_attention") model.scaled_attention = parse_bool(key, v);
        else if (key == "fusion_mode") {
            const std::string w = normalize_word(v);
            if (w == "feature_wise") model.fusion_mode = FusionMode::feature_wise;
            else if (w == "pixel_wise") model.fusion_mode = FusionMode::pixel_wise;
            else if (w == "channel_wise") model.fusion_mode = FusionMode::channel_wise;
            else if (w == "concat_only") model.fusion_mode = FusionMode::concat_only;
            else throw std::invalid_argument("config: fusion_mode must be feature_wise/pixel_wise/channel_wise/concat_only, got '" + v + "'");
        }
        else if (key == "fusion_norm") {
            const std::string w = normalize_word(v);
            if (w == "softmax") model.fusion_norm = FusionNorm::softmax;
            else if (w == "none") model.fusion_norm = FusionNorm::none;
            else throw std::invalid_argument("config: fusion_norm must be softmax or none, got '" + v + "'");
        }
        else if (key == "deep_supervision") model.deep_supervision = parse_bool(key, v);
        else if (key == "model_seed") model.seed = parse_u64(key, v);
        else if (key == "focus_invdepth") sim.focus_invdepth = parse_real(key, v);
        else if (key == "disparity_gain") sim.disparity_gain = parse_real(key, v);
        else if (key == "blur_with_defocus") sim.blur_with_defocus = parse_bool(key, v);
        else if (key == "sim_seed") sim.seed = parse_u64(key, v);
        else if (key == "lr0") optim.lr0 = parse_real(key, v);
        else if (key == "beta1") optim.beta1 = parse_real(key, v);
        else if (key == "beta2") optim.beta2 = parse_real(key, v);
        else if (key == "adam_eps") optim.eps = parse_real(key, v);
        else if (key == "poly_power") optim.poly_power = parse_real(key, v);
        else if (key == "steps") optim.total_steps = parse_int(key, v);
        else if (key == "batch_size") optim.batch_size = parse_int(key, v);
        else if (key == "train_seed") optim.seed = parse_u64(key, v);
        else if (key == "stage1_steps") stage1_steps = parse_int(key, v);
        else if (key == "stage2_steps") stage2_steps = parse_int(key, v);
        else if (key == "stage3_steps") stage3_steps = parse_int(key, v);
        else if (key == "log_every") log_every = parse_int(key, v);
        else if (key == "lambda") loss.lambda = parse_real(key, v);
        else if (key == "grad_scales") loss.grad_scales = parse_int(key, v);
        else if (key == "data") data = v;
        else if (key == "rgb_data") rgb_data = v;
        else if (key == "out") out = v;
        else if (key == "ckpt") ckpt = v;
        else if (key == "n") n = parse_int(key, v);
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }

    /// Applies a "key = value" assignment (the form --set uses).
    void set_pair(const std::string& assignment) {
        const size_t eq = assignment.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected key=value, got '" + assignment + "'");
        const std::string key = detail::trim(assignment.substr(0, eq));
        if (key.empty()) throw std::invalid_argument("config: empty key in '" + assignment + "'");
        set(key, assignment.substr(eq + 1));
    }

    /// Line-based file: '#' starts a comment, blank lines skipped, each
    /// remaining line is one "key = value" assignment.
    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error(path + ": cannot open config file");
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            try {
                set_pair(line);
            } catch (const std::exception& e) {
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    }

    /// Fills derived fields and validates. Call once after all assignments.
    void finalize() {
        if (!rgb_channels_explicit) model.rgb_channels = default_rgb_channels(model.base_channels);
        sim.height = model.height;
        sim.width = model.width;
        sim.axis = model.axis;
        if (stage1_steps <= 0) stage1_steps = optim.total_steps;
        if (stage2_steps <= 0) stage2_steps = optim.total_steps;
        if (stage3_steps <= 0) stage3_steps = optim.total_steps;
        if (log_every < 1) log_every = 1;
        if (rgb_data.empty()) rgb_data = data;
        model.validate();
        optim.validate();
        if (n < 1) throw std::invalid_argument("config: n must be >= 1");
    }

    /// The fully resolved configuration, one commented line per key.
    std::string echo() const {
        std::ostringstream os;
        auto kv = [&os](const std::string& k, const std::string& v) { os << "# " << k << " = " << v << "\n"; };
        auto num = [&](const std::string& k, Real v) {
            char buf[48];
            std::snprintf(buf, sizeof(buf), "%g", v);
            kv(k, buf);
        };
        kv("height", std::to_string(model.height));
        kv("width", std::to_string(model.width));
        kv("base_channels", std::to_string(model.base_channels));
        {
            std::string cs;
            for (size_t i = 0; i < model.rgb_channels.size(); ++i)
                cs += (i ? "," : "") + std::to_string(model.rgb_channels[i]);
            kv("rgb_channels", cs);
        }
        kv("dp_depth", std::to_string(model.dp_depth));
        kv("window_k", std::to_string(model.window_k));
        kv("axis", to_string(model.axis));
        kv("wbipam_mode", to_string(model.wbipam_mode));
        kv("scaled_attention", model.scaled_attention ? "true" : "false");
        kv("fusion_mode", detail::normalize_word(to_string(model.fusion_mode)));
        kv("fusion_norm", to_string(model.fusion_norm));
        kv("deep_supervision", model.deep_supervision ? "true" : "false");
        kv("model_seed", std::to_string(model.seed));
        num("focus_invdepth", sim.focus_invdepth);
        num("disparity_gain", sim.disparity_gain);
        kv("blur_with_defocus", sim.blur_with_defocus ? "true" : "false");
        kv("sim_seed", std::to_string(sim.seed));
        num("lr0", optim.lr0);
        num("beta1", optim.beta1);
        num("beta2", optim.beta2);
        num("adam_eps", optim.eps);
        num("poly_power", optim.poly_power);
        kv("steps", std::to_string(optim.total_steps));
        kv("batch_size", std::to_string(optim.batch_size));
        kv("train_seed", std::to_string(optim.seed));
        kv("stage1_steps", std::to_string(stage1_steps));
        kv("stage2_steps", std::to_string(stage2_steps));
        kv("stage3_steps", std::to_string(stage3_steps));
        kv("log_every", std::to_string(log_every));
        num("lambda", loss.lambda);
        kv("grad_scales", std::to_string(loss.grad_scales));
        kv("data", data);
        kv("rgb_data", rgb_data);
        kv("out", out);
        kv("ckpt", ckpt);
        kv("n", std::to_string(n));
        return os.str();
    }
};

}  // namespace dpdepth
