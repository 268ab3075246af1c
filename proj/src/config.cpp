#include "tpg/config.h"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tpg {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

// keys whose values change parameter shapes or wire formats
const char* kArchKeys[] = {
    "data.channels",   "model.base",     "model.stages",   "model.groups",   "model.t_dim",
    "model.attn_dim",  "model.film_hidden", "sem.dim",     "sem.tokens",     "sem.ctx_dim",
    "struct.dim",      "struct.latents", "struct.attn_dim", "deg.dim",       "deg.classes",
    "deg.slots",       "sem.heads",      "struct.seg_onehot",
};

} // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    auto d = [&](const char* k, const char* v) { c.kv_[k] = v; };
    d("seed", "0");
    d("out", "out");
    d("data.dir", "data/corpus");
    d("data.h", "16");
    d("data.w", "16");
    d("data.channels", "1");
    d("data.per_class", "50");
    d("data.kinds", "");    // empty = all five classes; else e.g. "noise"
    d("data.severity", "-1"); // < 0 draws per-sample severities
    d("sde.steps", "100");
    d("sde.lambda", "0.19607843137254902"); // 50/255 on [0,1] images
    d("sde.theta_span", "9.0");
    d("sde.schedule", "constant");
    d("model.base", "32");
    d("model.stages", "4");
    d("model.groups", "8");
    d("model.t_dim", "128");
    d("model.attn_dim", "32");
    d("model.film_hidden", "64");
    d("sem.dim", "64");
    d("sem.tokens", "4");
    d("sem.ctx_dim", "64");
    d("sem.heads", "1");
    d("struct.dim", "64");
    d("struct.latents", "16");
    d("struct.attn_dim", "32");
    d("struct.dog_sigma1", "1.0");
    d("struct.dog_sigma2", "2.0");
    d("struct.seg_onehot", "false");
    d("deg.dim", "64");
    d("deg.classes", "5");
    d("deg.slots", "8");
    d("inject.deg", "true");
    d("inject.sem", "true");
    d("inject.struct", "true");
    d("place.sem", "deep");
    d("place.struct", "shallow");
    d("opt.lr", "2e-5");
    d("opt.weight_decay", "1e-4");
    d("opt.beta1", "0.9");
    d("opt.beta2", "0.999");
    d("opt.cosine", "true");
    d("opt.batch", "8");
    d("train.steps", "2000");
    d("train.eval_every", "500");
    d("train.eval_split", "0.1");
    d("train.eval_samples", "8");
    d("train.label_smoothing", "0.01");
    d("restore.stochastic", "false");
    d("restore.clip", "true");
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    RunConfig c = defaults();
    c.load_file(path);
    return c;
}

RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig c = defaults();
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("config line missing '=': " + line);
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    RunConfig parsed = parse_text(ss.str());
    for (const auto& k : parsed.explicit_) set(k, parsed.kv_.at(k));
}

void RunConfig::apply_override(const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("override missing '=': " + kv);
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (key.empty()) throw std::invalid_argument("empty config key");
    kv_[key] = value;
    explicit_.insert(key);
}

std::string RunConfig::get_str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
    return it->second;
}

double RunConfig::get_double(const std::string& key) const {
    const std::string v = get_str(key);
    try {
        size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return d;
    } catch (...) {
        throw std::invalid_argument("config key '" + key + "' is not a number: '" + v + "'");
    }
}

int64_t RunConfig::get_int(const std::string& key) const {
    const std::string v = get_str(key);
    try {
        size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return i;
    } catch (...) {
        throw std::invalid_argument("config key '" + key + "' is not an integer: '" + v + "'");
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string v = get_str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::invalid_argument("config key '" + key + "' is not a boolean: '" + v + "'");
}

uint64_t RunConfig::seed() const {
    if (explicit_.count("seed")) return static_cast<uint64_t>(get_int("seed"));
    if (const char* env = std::getenv("TPG_SEED")) {
        try {
            return std::stoull(env);
        } catch (...) {
            throw std::invalid_argument("TPG_SEED is not an integer");
        }
    }
    return static_cast<uint64_t>(get_int("seed"));
}

std::string RunConfig::serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : kv_) os << k << "=" << v << "\n";
    return os.str();
}

uint64_t fnv1a64(const std::string& text) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

uint64_t RunConfig::arch_fingerprint() const {
    std::ostringstream os;
    for (const char* k : kArchKeys) os << k << "=" << get_str(k) << ";";
    return fnv1a64(os.str());
}

std::vector<std::string> RunConfig::arch_diff(const RunConfig& other) const {
    std::vector<std::string> diff;
    for (const char* k : kArchKeys) {
        const std::string a = get_str(k), b = other.get_str(k);
        if (a != b) diff.push_back(std::string(k) + ": " + a + " vs " + b);
    }
    return diff;
}

} // namespace tpg
