#include "trsp/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace trsp {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: bad boolean for '" + key + "': " + v);
}

std::size_t parse_size(const std::string& v, const std::string& key) {
    try {
        return static_cast<std::size_t>(std::stoull(v));
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for '" + key + "': " + v);
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number for '" + key + "': " + v);
    }
}

std::vector<double> parse_double_list(const std::string& v, const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_double(item, key));
    }
    if (out.empty()) throw ConfigError("config: empty list for '" + key + "'");
    return out;
}

}  // namespace

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    const std::string full = section + "." + key;
    if (section == "model") {
        if (key == "n_layers") n_layers = parse_size(value, full);
        else if (key == "d_model") d_model = parse_size(value, full);
        else if (key == "n_heads") n_heads = parse_size(value, full);
        else if (key == "ff_dim") ff_dim = parse_size(value, full);
        else if (key == "max_seq") max_seq = parse_size(value, full);
        else if (key == "layernorm_eps") layernorm_eps = parse_double(value, full);
        else if (key == "gate_full_stream") gate_full_stream = parse_bool(value, full);
        else if (key == "tokenizer") tokenizer = value;
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "data") {
        if (key == "corpus") corpus_path = value;
        else if (key == "synthetic_chars") synthetic_chars = parse_size(value, full);
        else if (key == "train_frac") train_frac = parse_double(value, full);
        else if (key == "val_frac") val_frac = parse_double(value, full);
        else if (key == "test_frac") test_frac = parse_double(value, full);
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "pretrain") {
        if (key == "steps") pretrain.max_steps = parse_size(value, full);
        else if (key == "batch_size") pretrain.batch_size = parse_size(value, full);
        else if (key == "seq_len") pretrain.seq_len = parse_size(value, full);
        else if (key == "lr") pretrain.lr = parse_double(value, full);
        else if (key == "eval_interval") pretrain.eval_interval = parse_size(value, full);
        else if (key == "eval_windows") pretrain.eval_windows = parse_size(value, full);
        else if (key == "min_delta") pretrain.min_delta = parse_double(value, full);
        else if (key == "early_stop_threshold") pretrain.early_stop_threshold = parse_size(value, full);
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "stage1") {
        if (key == "lambda1") stage1.lambda1 = parse_double(value, full);
        else if (key == "steps") stage1.steps = parse_size(value, full);
        else if (key == "lr") stage1.lr = parse_double(value, full);
        else if (key == "batch_size") stage1.batch_size = parse_size(value, full);
        else if (key == "joint_weights") stage1.joint_weights = parse_bool(value, full);
        else if (key == "reinit_gates") stage1.reinit_gates = parse_bool(value, full);
        else if (key == "select_by_magnitude") stage1.select_by_magnitude = parse_bool(value, full);
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "stage2") {
        if (key == "lambda2") stage2.lambda2 = parse_double(value, full);
        else if (key == "norm") {
            if (value == "l1") stage2.norm = Norm::L1;
            else if (value == "l2") stage2.norm = Norm::L2;
            else throw ConfigError("config: stage2.norm must be l1 or l2");
        } else if (key == "steps") stage2.steps = parse_size(value, full);
        else if (key == "lr") stage2.lr = parse_double(value, full);
        else if (key == "batch_size") stage2.batch_size = parse_size(value, full);
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "run") {
        if (key == "ratio") ratio = parse_double(value, full);
        else if (key == "mode") mode = value;
        else if (key == "regularize") regularize = parse_bool(value, full);
        else if (key == "calib_sequences") calib_sequences = parse_size(value, full);
        else if (key == "calib_len") calib_len = parse_size(value, full);
        else if (key == "eval_seq_len") eval_seq_len = parse_size(value, full);
        else if (key == "strategy") strategy = value;
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "bench") {
        if (key == "batch") bench_batch = parse_size(value, full);
        else if (key == "gen_len") bench_gen_len = parse_size(value, full);
        else if (key == "prompt_len") bench_prompt_len = parse_size(value, full);
        else if (key == "repeats") bench_repeats = parse_size(value, full);
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "grid") {
        if (key == "lambda1_list") lambda1_list = parse_double_list(value, full);
        else if (key == "lambda2_list") lambda2_list = parse_double_list(value, full);
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "global") {
        if (key == "seed") seed = parse_size(value, full);
        else if (key == "out") out_dir = value;
        else throw ConfigError("config: unknown key '" + full + "'");
    } else {
        throw ConfigError("config: unknown section '" + section + "'");
    }
}

RunConfig RunConfig::from_ini_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open file: " + path.string());
    RunConfig cfg;
    std::string line;
    std::string section = "global";
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto comment = line.find('#');
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("config: malformed section header at line " + std::to_string(lineno));
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
        }
        cfg.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void RunConfig::validate() const {
    if (tokenizer != "char" && tokenizer != "byte") {
        throw ConfigError("config: model.tokenizer must be 'char' or 'byte'");
    }
    if (mode != "iterative" && mode != "one_shot") {
        throw ConfigError("config: run.mode must be 'iterative' or 'one_shot'");
    }
    if (strategy != "trsp" && strategy != "similarity" && strategy != "loss-impact" &&
        strategy != "random") {
        throw ConfigError("config: run.strategy must be trsp|similarity|loss-impact|random");
    }
    if (calib_len > max_seq) {
        throw ConfigError("config: run.calib_len exceeds model.max_seq");
    }
    if (corpus_path.empty() && synthetic_chars == 0) {
        throw ConfigError("config: data.corpus is missing and data.synthetic_chars is 0");
    }
    stage1.validate();
    stage2.validate();
}

TokenizerMode RunConfig::tokenizer_mode() const {
    return tokenizer == "byte" ? TokenizerMode::Byte : TokenizerMode::Char;
}

ModelConfig RunConfig::model_config(std::size_t vocab) const {
    ModelConfig mc;
    mc.n_layers = n_layers;
    mc.d_model = d_model;
    mc.n_heads = n_heads;
    mc.ff_dim = ff_dim;
    mc.vocab = vocab;
    mc.max_seq = max_seq;
    mc.layernorm_eps = layernorm_eps;
    mc.gate_full_stream = gate_full_stream;
    return mc;
}

RunSettings RunConfig::run_settings() const {
    RunSettings rs;
    rs.ratio = ratio;
    rs.mode = mode == "one_shot" ? SelectionMode::OneShot : SelectionMode::Iterative;
    rs.regularize = regularize;
    rs.calib_sequences = calib_sequences;
    rs.calib_len = calib_len;
    rs.eval_seq_len = eval_seq_len;
    rs.seed = seed;
    return rs;
}

std::string RunConfig::to_json() const {
    json j;
    j["model"] = {{"n_layers", n_layers},     {"d_model", d_model},
                  {"n_heads", n_heads},       {"ff_dim", ff_dim},
                  {"max_seq", max_seq},       {"layernorm_eps", layernorm_eps},
                  {"gate_full_stream", gate_full_stream}, {"tokenizer", tokenizer}};
    j["data"] = {{"corpus", corpus_path},
                 {"synthetic_chars", synthetic_chars},
                 {"train_frac", train_frac},
                 {"val_frac", val_frac},
                 {"test_frac", test_frac}};
    j["pretrain"] = {{"steps", pretrain.max_steps},
                     {"batch_size", pretrain.batch_size},
                     {"seq_len", pretrain.seq_len},
                     {"lr", pretrain.lr},
                     {"eval_interval", pretrain.eval_interval},
                     {"eval_windows", pretrain.eval_windows},
                     {"min_delta", pretrain.min_delta},
                     {"early_stop_threshold", pretrain.early_stop_threshold}};
    j["stage1"] = {{"lambda1", stage1.lambda1},
                   {"steps", stage1.steps},
                   {"lr", stage1.lr},
                   {"batch_size", stage1.batch_size},
                   {"joint_weights", stage1.joint_weights},
                   {"reinit_gates", stage1.reinit_gates},
                   {"select_by_magnitude", stage1.select_by_magnitude}};
    j["stage2"] = {{"lambda2", stage2.lambda2},
                   {"norm", stage2.norm == Norm::L1 ? "l1" : "l2"},
                   {"steps", stage2.steps},
                   {"lr", stage2.lr},
                   {"batch_size", stage2.batch_size}};
    j["run"] = {{"ratio", ratio},
                {"mode", mode},
                {"regularize", regularize},
                {"calib_sequences", calib_sequences},
                {"calib_len", calib_len},
                {"eval_seq_len", eval_seq_len},
                {"strategy", strategy}};
    j["bench"] = {{"batch", bench_batch},
                  {"gen_len", bench_gen_len},
                  {"prompt_len", bench_prompt_len},
                  {"repeats", bench_repeats}};
    j["grid"] = {{"lambda1_list", lambda1_list}, {"lambda2_list", lambda2_list}};
    j["global"] = {{"seed", seed}, {"out", out_dir}};
    return j.dump(2);
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad JSON: ") + e.what());
    }
    RunConfig c;
    const json& m = j.at("model");
    c.n_layers = m.at("n_layers");
    c.d_model = m.at("d_model");
    c.n_heads = m.at("n_heads");
    c.ff_dim = m.at("ff_dim");
    c.max_seq = m.at("max_seq");
    c.layernorm_eps = m.at("layernorm_eps");
    c.gate_full_stream = m.at("gate_full_stream");
    c.tokenizer = m.at("tokenizer");
    const json& d = j.at("data");
    c.corpus_path = d.at("corpus");
    c.synthetic_chars = d.at("synthetic_chars");
    c.train_frac = d.at("train_frac");
    c.val_frac = d.at("val_frac");
    c.test_frac = d.at("test_frac");
    const json& p = j.at("pretrain");
    c.pretrain.max_steps = p.at("steps");
    c.pretrain.batch_size = p.at("batch_size");
    c.pretrain.seq_len = p.at("seq_len");
    c.pretrain.lr = p.at("lr");
    c.pretrain.eval_interval = p.at("eval_interval");
    c.pretrain.eval_windows = p.at("eval_windows");
    c.pretrain.min_delta = p.at("min_delta");
    c.pretrain.early_stop_threshold = p.at("early_stop_threshold");
    const json& s1 = j.at("stage1");
    c.stage1.lambda1 = s1.at("lambda1");
    c.stage1.steps = s1.at("steps");
    c.stage1.lr = s1.at("lr");
    c.stage1.batch_size = s1.at("batch_size");
    c.stage1.joint_weights = s1.at("joint_weights");
    c.stage1.reinit_gates = s1.at("reinit_gates");
    c.stage1.select_by_magnitude = s1.at("select_by_magnitude");
    const json& s2 = j.at("stage2");
    c.stage2.lambda2 = s2.at("lambda2");
    c.stage2.norm = s2.at("norm") == "l1" ? Norm::L1 : Norm::L2;
    c.stage2.steps = s2.at("steps");
    c.stage2.lr = s2.at("lr");
    c.stage2.batch_size = s2.at("batch_size");
    const json& r = j.at("run");
    c.ratio = r.at("ratio");
    c.mode = r.at("mode");
    c.regularize = r.at("regularize");
    c.calib_sequences = r.at("calib_sequences");
    c.calib_len = r.at("calib_len");
    c.eval_seq_len = r.at("eval_seq_len");
    c.strategy = r.at("strategy");
    const json& b = j.at("bench");
    c.bench_batch = b.at("batch");
    c.bench_gen_len = b.at("gen_len");
    c.bench_prompt_len = b.at("prompt_len");
    c.bench_repeats = b.at("repeats");
    const json& g = j.at("grid");
    c.lambda1_list = g.at("lambda1_list").get<std::vector<double>>();
    c.lambda2_list = g.at("lambda2_list").get<std::vector<double>>();
    const json& gl = j.at("global");
    c.seed = gl.at("seed");
    c.out_dir = gl.at("out");
    return c;
}

RunConfig RunConfig::from_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open manifest: " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad manifest JSON: ") + e.what());
    }
    return from_json_text(j.at("config").dump());
}

Corpus load_configured_corpus(const RunConfig& cfg) {
    SplitFractions fr{cfg.train_frac, cfg.val_frac, cfg.test_frac};
    if (!cfg.corpus_path.empty()) {
        return load_corpus(cfg.corpus_path, cfg.tokenizer_mode(), fr, cfg.seed);
    }
    return corpus_from_text(synthetic_corpus(cfg.synthetic_chars, cfg.seed),
                            cfg.tokenizer_mode(), "synthetic", fr, cfg.seed);
}

void write_manifest(const std::filesystem::path& path, const std::string& command,
                    const RunConfig& cfg, const std::string& args_json,
                    const std::string& results_json) {
    json j;
    j["command"] = command;
    j["config"] = json::parse(cfg.to_json());
    j["args"] = args_json.empty() ? json::object() : json::parse(args_json);
    j["results"] = results_json.empty() ? json::object() : json::parse(results_json);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write manifest: " + path.string());
    os << j.dump(2) << "\n";
}

}  // namespace trsp
