#ifndef TPG_CONFIG_H
#define TPG_CONFIG_H

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace tpg {

// Flat key=value run configuration. Values stay strings; typed getters parse
// on access. A config file is `key = value` lines with '#' comments; any key
// can be overridden from the command line. The env var TPG_SEED supplies the
// seed when no config or flag sets one.
class RunConfig {
public:
    static RunConfig defaults();
    static RunConfig from_file(const std::string& path);
    static RunConfig parse_text(const std::string& text);

    void load_file(const std::string& path);
    void apply_override(const std::string& key_equals_value);
    void set(const std::string& key, const std::string& value);

    bool has(const std::string& key) const { return kv_.count(key) != 0; }
    std::string get_str(const std::string& key) const;
    double get_double(const std::string& key) const;
    int64_t get_int(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    uint64_t seed() const;

    // canonical serialization: sorted key=value lines, one per key
    std::string serialize() const;

    // fingerprint over the shape-defining keys; checkpoints refuse to load
    // when it disagrees with the active config
    uint64_t arch_fingerprint() const;
    std::vector<std::string> arch_diff(const RunConfig& other) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
    std::set<std::string> explicit_;
};

uint64_t fnv1a64(const std::string& text);

} // namespace tpg

#endif
