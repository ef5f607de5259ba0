#pragma once

// Experiment configuration.
//
// Files use a TOML subset: [table] headers, `key = value` pairs, comments,
// and values that are strings, integers, floats, booleans, or (possibly
// nested, possibly multi-line) arrays. Dotted keys, inline tables, arrays of
// tables and dates are not supported and are rejected. Parsed documents
// become JSON objects; the same schema mapping reads a manifest's config echo.
//
// Any key the schema does not know is a hard error.

#include <cctype>
#include <cstdint>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "json.hpp"

#include "emcomm/error.hpp"
#include "emcomm/gen_bound.hpp"
#include "emcomm/trainer.hpp"

namespace emcomm {

using Json = nlohmann::ordered_json;

// ------------------------------------------------------------- TOML subset

namespace toml_detail {

class Parser {
public:
    explicit Parser(std::string_view text) : s_(text) {}

    Json parse() {
        Json root = Json::object();
        Json* table = &root;
        std::set<std::string> tables;
        while (true) {
            skip_blank_lines();
            if (eof()) break;
            const std::size_t start = pos_;
            if (peek() == '[') {
                ++pos_;
                if (!eof() && peek() == '[') fail("arrays of tables are not supported");
                skip_ws();
                const std::string name = bare_key();
                skip_ws();
                expect(']');
                end_of_line();
                if (!tables.insert(name).second || root.contains(name)) fail_at(start, "duplicate table [" + name + "]");
                root[name] = Json::object();
                table = &root[name];
                continue;
            }
            const std::string key = peek() == '"' ? basic_string() : bare_key();
            skip_ws();
            if (!eof() && peek() == '.') fail("dotted keys are not supported");
            expect('=');
            skip_ws();
            Json v = value();
            end_of_line();
            if (table->contains(key)) fail_at(start, "duplicate key '" + key + "'");
            (*table)[key] = std::move(v);
        }
        return root;
    }

private:
    std::string_view s_;
    std::size_t pos_ = 0;

    bool eof() const { return pos_ >= s_.size(); }
    char peek() const { return s_[pos_]; }

    std::size_t line(std::size_t at) const {
        std::size_t l = 1;
        for (std::size_t i = 0; i < at && i < s_.size(); ++i) l += s_[i] == '\n';
        return l;
    }

    [[noreturn]] void fail_at(std::size_t at, const std::string& msg) const {
        throw config_error("config line " + std::to_string(line(at)) + ": " + msg);
    }

    [[noreturn]] void fail(const std::string& msg) const { fail_at(pos_, msg); }

    // Reads `digits` hex characters and appends the code point as UTF-8.
    void unicode_escape(std::string& out, int digits) {
        if (pos_ + static_cast<std::size_t>(digits) > s_.size()) fail("truncated unicode escape");
        std::uint32_t cp = 0;
        for (int i = 0; i < digits; ++i) {
            const char h = s_[pos_++];
            cp <<= 4;
            if (h >= '0' && h <= '9') cp |= static_cast<std::uint32_t>(h - '0');
            else if (h >= 'a' && h <= 'f') cp |= static_cast<std::uint32_t>(h - 'a' + 10);
            else if (h >= 'A' && h <= 'F') cp |= static_cast<std::uint32_t>(h - 'A' + 10);
            else fail("invalid unicode escape");
        }
        if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) fail("invalid unicode scalar value");
        if (cp < 0x80) {
            out.push_back(static_cast<char>(cp));
        } else if (cp < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else if (cp < 0x10000) {
            out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else {
            out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
    }

    void skip_ws() {
        while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
    }

    void skip_comment() {
        if (!eof() && peek() == '#') {
            while (!eof() && peek() != '\n') ++pos_;
        }
    }

    void skip_blank_lines() {
        while (!eof()) {
            skip_ws();
            skip_comment();
            if (eof()) return;
            if (peek() == '\n') {
                ++pos_;
            } else if (peek() == '\r' && pos_ + 1 < s_.size() && s_[pos_ + 1] == '\n') {
                pos_ += 2;
            } else {
                return;
            }
        }
    }

    // Whitespace, comments and newlines inside arrays.
    void skip_array_space() { skip_blank_lines(); }

    void end_of_line() {
        skip_ws();
        skip_comment();
        if (eof()) return;
        if (peek() == '\r') ++pos_;
        if (eof() || peek() != '\n') fail("unexpected trailing content");
        ++pos_;
    }

    void expect(char c) {
        if (eof() || peek() != c) fail(std::string("expected '") + c + "'");
        ++pos_;
    }

    std::string bare_key() {
        const std::size_t start = pos_;
        while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) ++pos_;
        if (pos_ == start) fail("expected a key");
        return std::string(s_.substr(start, pos_ - start));
    }

    std::string basic_string() {
        expect('"');
        std::string out;
        while (true) {
            if (eof() || peek() == '\n') fail("unterminated string");
            const char c = s_[pos_++];
            if (c == '"') break;
            if (c != '\\') {
                out.push_back(c);
                continue;
            }
            if (eof()) fail("unterminated string");
            const char e = s_[pos_++];
            switch (e) {
            case '"': out.push_back('"'); break;
            case '\\': out.push_back('\\'); break;
            case 'n': out.push_back('\n'); break;
            case 't': out.push_back('\t'); break;
            case 'r': out.push_back('\r'); break;
            case 'u': unicode_escape(out, 4); break;
            case 'U': unicode_escape(out, 8); break;
            default: fail(std::string("unsupported escape \\") + e);
            }
        }
        return out;
    }

    std::string literal_string() {
        expect('\'');
        const std::size_t start = pos_;
        while (!eof() && peek() != '\'' && peek() != '\n') ++pos_;
        if (eof() || peek() != '\'') fail("unterminated string");
        std::string out(s_.substr(start, pos_ - start));
        ++pos_;
        return out;
    }

    Json array() {
        expect('[');
        Json arr = Json::array();
        while (true) {
            skip_array_space();
            if (eof()) fail("unterminated array");
            if (peek() == ']') {
                ++pos_;
                return arr;
            }
            arr.push_back(value());
            skip_array_space();
            if (eof()) fail("unterminated array");
            if (peek() == ',') {
                ++pos_;
            } else if (peek() != ']') {
                fail("expected ',' or ']' in array");
            }
        }
    }

    Json value() {
        if (eof()) fail("missing value");
        const char c = peek();
        if (c == '"') return basic_string();
        if (c == '\'') return literal_string();
        if (c == '[') return array();
        if (c == '{') fail("inline tables are not supported");
        const std::size_t start = pos_;
        while (!eof() && !std::isspace(static_cast<unsigned char>(peek())) && peek() != ',' && peek() != ']' &&
               peek() != '#') {
            ++pos_;
        }
        std::string tok(s_.substr(start, pos_ - start));
        if (tok == "true") return true;
        if (tok == "false") return false;
        return number(tok);
    }

    Json number(std::string tok) {
        if (tok.empty()) fail("missing value");
        std::string clean;
        for (std::size_t i = 0; i < tok.size(); ++i) {
            if (tok[i] == '_') {
                if (i == 0 || i + 1 == tok.size() || !std::isdigit(static_cast<unsigned char>(tok[i - 1])) ||
                    !std::isdigit(static_cast<unsigned char>(tok[i + 1]))) {
                    fail("bad number '" + tok + "'");
                }
                continue;
            }
            clean.push_back(tok[i]);
        }
        std::string body = clean;
        if (!body.empty() && (body[0] == '+' || body[0] == '-')) body = body.substr(1);
        if (body == "inf") return clean[0] == '-' ? -INFINITY : INFINITY;
        if (body == "nan") return NAN;
        const bool is_float = clean.find_first_of(".eE") != std::string::npos;
        for (char ch : body) {
            if (!std::isdigit(static_cast<unsigned char>(ch)) && ch != '.' && ch != 'e' && ch != 'E' && ch != '+' &&
                ch != '-') {
                fail("bad value '" + tok + "'");
            }
        }
        if (body.empty() || !std::isdigit(static_cast<unsigned char>(body[0]))) fail("bad value '" + tok + "'");
        std::size_t used = 0;
        try {
            if (is_float) {
                const double d = std::stod(clean, &used);
                if (used == clean.size()) return d;
            } else {
                const long long v = std::stoll(clean, &used, 10);
                if (used == clean.size()) return v;
            }
        } catch (const std::exception&) {
        }
        fail("bad value '" + tok + "'");
    }
};

} // namespace toml_detail

inline Json parse_toml(std::string_view text) { return toml_detail::Parser(text).parse(); }

// ------------------------------------------------------------------ schema

struct DataConfig {
    std::size_t size = 4000;
    // Non-empty: ingest this trace CSV instead of simulating.
    std::string trace;
};

struct ExperimentConfig {
    EnvConfig env;
    DataConfig data;
    TrainConfig train;
    BoundSettings bound;

    void validate() const {
        env.validate();
        train.validate();
        if (data.size < 2) throw config_error("data: size must be at least 2");
        if (!(bound.t > 1.0)) throw config_error("bound: t must exceed 1");
        if (!(bound.delta > 0.0 && bound.delta < 1.0)) throw config_error("bound: delta must lie in (0, 1)");
        if (!(bound.variance_floor > 0.0)) throw config_error("bound: variance_floor must be > 0");
        if (bound.prior_variance && !(*bound.prior_variance > 0.0)) {
            throw config_error("bound: prior_variance must be > 0");
        }
        if (bound.loss_range && !(bound.loss_range->second > bound.loss_range->first)) {
            throw config_error("bound: loss_range needs b > a");
        }
    }
};

namespace config_detail {

// Reads one table, remembering which keys were consumed.
class Table {
public:
    Table(const Json& root, std::string name) : name_(std::move(name)) {
        if (!root.contains(name_)) return;
        const Json& t = root.at(name_);
        if (!t.is_object()) throw config_error("[" + name_ + "] must be a table");
        table_ = &t;
    }

    template <class F>
    void get(const std::string& key, F&& assign) {
        seen_.insert(key);
        if (!table_ || !table_->contains(key)) return;
        try {
            assign(table_->at(key));
        } catch (const config_error& e) {
            throw config_error(name_ + "." + key + ": " + e.what());
        }
    }

    void finish() const {
        if (!table_) return;
        for (const auto& [k, v] : table_->items()) {
            if (!seen_.count(k)) throw config_error("unknown key '" + k + "' in [" + name_ + "]");
        }
    }

private:
    std::string name_;
    const Json* table_ = nullptr;
    std::set<std::string> seen_;
};

inline double as_double(const Json& v) {
    if (!v.is_number()) throw config_error("expected a number");
    return v.get<double>();
}

inline std::size_t as_size(const Json& v) {
    if (!v.is_number_integer()) throw config_error("expected an integer");
    const auto x = v.get<long long>();
    if (x < 0) throw config_error("expected a non-negative integer");
    return static_cast<std::size_t>(x);
}

inline long as_long(const Json& v) {
    if (!v.is_number_integer()) throw config_error("expected an integer");
    return static_cast<long>(v.get<long long>());
}

inline bool as_bool(const Json& v) {
    if (!v.is_boolean()) throw config_error("expected true or false");
    return v.get<bool>();
}

inline std::string as_string(const Json& v) {
    if (!v.is_string()) throw config_error("expected a string");
    return v.get<std::string>();
}

inline std::uint64_t as_u64(const Json& v) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (!v.is_number_integer() || v.get<long long>() < 0) throw config_error("expected a non-negative integer");
    return static_cast<std::uint64_t>(v.get<long long>());
}

template <class T, class F>
std::vector<T> as_list(const Json& v, F&& elem) {
    if (!v.is_array()) throw config_error("expected an array");
    std::vector<T> out;
    for (const auto& e : v) out.push_back(elem(e));
    return out;
}

inline std::vector<double> as_double_list_or_scalar(const Json& v) {
    if (v.is_number()) return {v.get<double>()};
    return as_list<double>(v, as_double);
}

template <class T, class F>
std::vector<std::vector<T>> as_matrix(const Json& v, F&& elem) {
    return as_list<std::vector<T>>(v, [&](const Json& row) { return as_list<T>(row, elem); });
}

} // namespace config_detail

inline ExperimentConfig config_from_json(const Json& root) {
    using namespace config_detail;
    if (!root.is_object()) throw config_error("config must be a table");
    static const std::set<std::string> known{"env", "data", "model", "train", "bound"};
    for (const auto& [k, v] : root.items()) {
        if (!known.count(k)) throw config_error("unknown table or key '" + k + "'");
    }
    ExperimentConfig c;

    Table env(root, "env");
    auto& e = c.env;
    env.get("app_classes", [&](const Json& v) { e.app_classes = as_size(v); });
    env.get("demand_levels", [&](const Json& v) { e.demand_levels = as_size(v); });
    env.get("channel_levels", [&](const Json& v) { e.channel_levels = as_size(v); });
    env.get("window", [&](const Json& v) { e.window = as_size(v); });
    env.get("noise_scale", [&](const Json& v) { e.noise_scale = as_double(v); });
    env.get("traffic_ar", [&](const Json& v) { e.traffic_ar = as_double(v); });
    env.get("app_stay_prob", [&](const Json& v) { e.app_stay_prob = as_double(v); });
    env.get("app_rate_means", [&](const Json& v) { e.app_rate_means = as_list<double>(v, as_double); });
    env.get("rate_noise", [&](const Json& v) { e.rate_noise = as_double(v); });
    env.get("demand_thresholds", [&](const Json& v) { e.demand_thresholds = as_list<double>(v, as_double); });
    env.get("channel_transition", [&](const Json& v) { e.channel_transition = as_matrix<double>(v, as_double); });
    env.get("snr_levels_db", [&](const Json& v) { e.snr_levels_db = as_list<double>(v, as_double); });
    env.get("snr_jitter_db", [&](const Json& v) { e.snr_jitter_db = as_double(v); });
    env.get("snr_offset_db", [&](const Json& v) { e.snr_offset_db = as_double(v); });
    env.get("snr_scale_db", [&](const Json& v) { e.snr_scale_db = as_double(v); });
    env.get("initial_channel_level", [&](const Json& v) { e.initial_channel_level = as_long(v); });
    env.get("resource_table", [&](const Json& v) { e.resource_table = as_matrix<std::size_t>(v, as_size); });
    env.get("resource_configs", [&](const Json& v) { e.resource_configs = as_size(v); });
    env.get("burn_in", [&](const Json& v) { e.burn_in = as_size(v); });
    env.get("sample_stride", [&](const Json& v) { e.sample_stride = as_size(v); });
    env.get("app_labels", [&](const Json& v) { e.app_labels = as_list<std::string>(v, as_string); });
    env.get("trace_bytes_per_unit", [&](const Json& v) { e.trace_bytes_per_unit = as_double(v); });
    env.get("trace_channel_seed", [&](const Json& v) { e.trace_channel_seed = as_u64(v); });
    env.finish();

    Table data(root, "data");
    data.get("size", [&](const Json& v) { c.data.size = as_size(v); });
    data.get("trace", [&](const Json& v) { c.data.trace = as_string(v); });
    data.finish();

    Table model(root, "model");
    auto& m = c.train.model;
    model.get("message_dim", [&](const Json& v) { m.message_dim = as_size(v); });
    model.get("encoder_hidden", [&](const Json& v) { m.encoder_hidden = as_list<std::size_t>(v, as_size); });
    model.get("policy_hidden", [&](const Json& v) { m.policy_hidden = as_list<std::size_t>(v, as_size); });
    model.get("decoder_hidden", [&](const Json& v) { m.decoder_hidden = as_list<std::size_t>(v, as_size); });
    model.get("learnable_prior", [&](const Json& v) { m.learnable_prior = as_bool(v); });
    model.get("per_receiver_heads", [&](const Json& v) { m.per_receiver_heads = as_bool(v); });
    model.get("message_bits", [&](const Json& v) { m.message_bits = static_cast<unsigned>(as_size(v)); });
    model.get("quant_range", [&](const Json& v) { m.quant_range = as_double(v); });
    model.get("sample_at_inference", [&](const Json& v) { m.sample_at_inference = as_bool(v); });
    model.finish();

    Table train(root, "train");
    auto& t = c.train;
    train.get("lambda_t", [&](const Json& v) { t.lambda_t = as_double_list_or_scalar(v); });
    train.get("lambda_c", [&](const Json& v) { t.lambda_c = as_double_list_or_scalar(v); });
    train.get("optimizer", [&](const Json& v) {
        const auto s = as_string(v);
        if (s == "adam") {
            t.optimizer.kind = OptimizerKind::adam;
        } else if (s == "sgd") {
            t.optimizer.kind = OptimizerKind::sgd;
        } else {
            throw config_error("expected \"adam\" or \"sgd\"");
        }
    });
    train.get("learning_rate", [&](const Json& v) { t.optimizer.learning_rate = as_double(v); });
    train.get("beta1", [&](const Json& v) { t.optimizer.beta1 = as_double(v); });
    train.get("beta2", [&](const Json& v) { t.optimizer.beta2 = as_double(v); });
    train.get("epsilon", [&](const Json& v) { t.optimizer.epsilon = as_double(v); });
    train.get("batch_size", [&](const Json& v) { t.batch_size = as_size(v); });
    train.get("iterations", [&](const Json& v) { t.iterations = as_size(v); });
    train.get("eval_interval", [&](const Json& v) { t.eval_interval = as_size(v); });
    train.get("seed", [&](const Json& v) { t.seed = as_u64(v); });
    train.get("holdout_fraction", [&](const Json& v) { t.holdout_fraction = as_double(v); });
    train.get("divergence_threshold", [&](const Json& v) { t.divergence_threshold = as_double(v); });
    train.get("baseline", [&](const Json& v) {
        const auto s = as_string(v);
        if (s == "none") {
            t.baseline = BaselineMode::none;
        } else if (s == "ec-sota") {
            t.baseline = BaselineMode::ec_sota;
        } else {
            throw config_error("expected \"none\" or \"ec-sota\"");
        }
    });
    train.get("recon_eval_samples", [&](const Json& v) { t.recon_eval_samples = as_size(v); });
    train.finish();

    Table bound(root, "bound");
    auto& b = c.bound;
    bound.get("t", [&](const Json& v) { b.t = as_double(v); });
    bound.get("delta", [&](const Json& v) { b.delta = as_double(v); });
    bound.get("sigma_mode", [&](const Json& v) {
        const auto s = as_string(v);
        if (s == "range") {
            b.sigma_mode = SigmaMode::range;
        } else if (s == "sample") {
            b.sigma_mode = SigmaMode::sample;
        } else {
            throw config_error("expected \"range\" or \"sample\"");
        }
    });
    bound.get("loss_range", [&](const Json& v) {
        const auto r = as_list<double>(v, as_double);
        if (r.empty()) return;
        if (r.size() != 2) throw config_error("expected [a, b] or []");
        b.loss_range = std::pair{r[0], r[1]};
    });
    bound.get("prior_variance", [&](const Json& v) {
        const double x = as_double(v);
        if (x != 0.0) b.prior_variance = x;
    });
    bound.get("variance_floor", [&](const Json& v) { b.variance_floor = as_double(v); });
    bound.finish();

    c.validate();
    return c;
}

inline Json to_json(const ExperimentConfig& c) {
    Json j;
    const auto& e = c.env;
    j["env"] = {{"app_classes", e.app_classes},
                {"demand_levels", e.demand_levels},
                {"channel_levels", e.channel_levels},
                {"window", e.window},
                {"noise_scale", e.noise_scale},
                {"traffic_ar", e.traffic_ar},
                {"app_stay_prob", e.app_stay_prob},
                {"app_rate_means", e.app_rate_means},
                {"rate_noise", e.rate_noise},
                {"demand_thresholds", e.demand_thresholds},
                {"channel_transition", e.channel_transition},
                {"snr_levels_db", e.snr_levels_db},
                {"snr_jitter_db", e.snr_jitter_db},
                {"snr_offset_db", e.snr_offset_db},
                {"snr_scale_db", e.snr_scale_db},
                {"initial_channel_level", e.initial_channel_level},
                {"resource_table", e.resource_table},
                {"resource_configs", e.resource_configs},
                {"burn_in", e.burn_in},
                {"sample_stride", e.sample_stride},
                {"app_labels", e.app_labels},
                {"trace_bytes_per_unit", e.trace_bytes_per_unit},
                {"trace_channel_seed", e.trace_channel_seed}};
    j["data"] = {{"size", c.data.size}, {"trace", c.data.trace}};
    const auto& m = c.train.model;
    j["model"] = {{"message_dim", m.message_dim},
                  {"encoder_hidden", m.encoder_hidden},
                  {"policy_hidden", m.policy_hidden},
                  {"decoder_hidden", m.decoder_hidden},
                  {"learnable_prior", m.learnable_prior},
                  {"per_receiver_heads", m.per_receiver_heads},
                  {"message_bits", m.message_bits},
                  {"quant_range", m.quant_range},
                  {"sample_at_inference", m.sample_at_inference}};
    const auto& t = c.train;
    j["train"] = {{"lambda_t", t.lambda_t},
                  {"lambda_c", t.lambda_c},
                  {"optimizer", t.optimizer.kind == OptimizerKind::adam ? "adam" : "sgd"},
                  {"learning_rate", t.optimizer.learning_rate},
                  {"beta1", t.optimizer.beta1},
                  {"beta2", t.optimizer.beta2},
                  {"epsilon", t.optimizer.epsilon},
                  {"batch_size", t.batch_size},
                  {"iterations", t.iterations},
                  {"eval_interval", t.eval_interval},
                  {"seed", t.seed},
                  {"holdout_fraction", t.holdout_fraction},
                  {"divergence_threshold", t.divergence_threshold},
                  {"baseline", to_string(t.baseline)},
                  {"recon_eval_samples", t.recon_eval_samples}};
    const auto& b = c.bound;
    j["bound"] = {{"t", b.t},
                  {"delta", b.delta},
                  {"sigma_mode", to_string(b.sigma_mode)},
                  {"loss_range", b.loss_range ? std::vector<double>{b.loss_range->first, b.loss_range->second}
                                              : std::vector<double>{}},
                  {"prior_variance", b.prior_variance.value_or(0.0)},
                  {"variance_floor", b.variance_floor}};
    return j;
}

inline ExperimentConfig parse_config(std::string_view toml_text) { return config_from_json(parse_toml(toml_text)); }

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw config_error("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

} // namespace emcomm
