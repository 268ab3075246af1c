#include "tpg/checkpoint.h"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tpg {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_string(std::vector<uint8_t>& out, const std::string& s) {
    put_u64(out, s.size());
    out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
    const uint8_t* p;
    size_t size;
    size_t off = 0;
    void need(size_t n) const {
        if (off + n > size) throw std::runtime_error("truncated checkpoint");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[off + i]) << (8 * i);
        off += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[off + i]) << (8 * i);
        off += 8;
        return v;
    }
    std::string str() {
        const uint64_t n = u64();
        need(n);
        std::string s(reinterpret_cast<const char*>(p + off), n);
        off += n;
        return s;
    }
};

constexpr uint32_t kCkptVersion = 1;

} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::vector<uint8_t> bytes;
    bytes.insert(bytes.end(), {'T', 'P', 'G', 'C'});
    put_u32(bytes, kCkptVersion);
    put_u32(bytes, ckpt.stage);
    put_u64(bytes, ckpt.step);
    put_u64(bytes, ckpt.fingerprint);
    put_string(bytes, ckpt.config_text);
    put_u64(bytes, ckpt.params.size());
    for (const auto& [name, t] : ckpt.params) {
        put_string(bytes, name);
        write_tensor_bytes(bytes, t);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{bytes.data(), bytes.size()};
    r.need(4);
    if (std::memcmp(bytes.data(), "TPGC", 4) != 0) throw std::runtime_error("bad checkpoint magic in " + path);
    r.off = 4;
    if (r.u32() != kCkptVersion) throw std::runtime_error("unsupported checkpoint version");
    Checkpoint ckpt;
    ckpt.stage = r.u32();
    ckpt.step = r.u64();
    ckpt.fingerprint = r.u64();
    ckpt.config_text = r.str();
    const uint64_t count = r.u64();
    ckpt.params.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        std::string name = r.str();
        Tensor t = read_tensor_bytes(bytes.data(), bytes.size(), r.off);
        ckpt.params.emplace_back(std::move(name), std::move(t));
    }
    return ckpt;
}

Checkpoint make_checkpoint(uint32_t stage, uint64_t step, const RunConfig& cfg, const ParamStore& params) {
    Checkpoint ckpt;
    ckpt.stage = stage;
    ckpt.step = step;
    ckpt.config_text = cfg.serialize();
    ckpt.fingerprint = cfg.arch_fingerprint();
    for (const auto& [name, t] : params.items()) ckpt.params.emplace_back(name, t);
    return ckpt;
}

void restore_params(const Checkpoint& ckpt, const RunConfig& active_cfg, ParamStore& store) {
    if (ckpt.fingerprint != active_cfg.arch_fingerprint()) {
        RunConfig stored = RunConfig::parse_text(ckpt.config_text);
        std::string msg = "checkpoint architecture conflicts with the active config:";
        for (const auto& d : active_cfg.arch_diff(stored)) msg += "\n  " + d;
        throw std::runtime_error(msg);
    }
    for (const auto& [name, t] : ckpt.params) {
        Tensor* dst = store.find(name);
        if (dst == nullptr) continue; // checkpoint may carry more than this store needs
        if (dst->shape() != t.shape())
            throw std::runtime_error("checkpoint parameter " + name + " has shape " + shape_str(t.shape()) +
                                     ", expected " + shape_str(dst->shape()));
        std::memcpy(dst->data(), t.data(), static_cast<size_t>(t.numel()) * sizeof(double));
    }
    // every store entry must have been covered
    for (const auto& [name, t] : store.items()) {
        bool found = false;
        for (const auto& [cname, ct] : ckpt.params)
            if (cname == name) {
                found = true;
                break;
            }
        if (!found) throw std::runtime_error("checkpoint is missing parameter " + name);
    }
}

} // namespace tpg
