#include "fpro/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

namespace fpro {

namespace {

constexpr char kMagic[4] = {'F', 'P', 'R', 'O'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

struct Reader {
    const uint8_t* p;
    size_t n;
    size_t off = 0;

    void need(size_t k) const {
        if (off + k > n) throw FormatError("truncated checkpoint file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(p[off + size_t(i)]) << (8 * i);
        off += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(p[off + size_t(i)]) << (8 * i);
        off += 8;
        return v;
    }
    uint8_t u8() {
        need(1);
        return p[off++];
    }
    std::string bytes(size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p + off), k);
        off += k;
        return s;
    }
};

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
}

std::string config_block(const ModelConfig& c, uint64_t seed, const std::string& precision,
                         const CheckpointMeta& meta) {
    std::ostringstream os;
    os << "levels=" << c.levels << "\n";
    os << "blocks=" << join_ints(c.blocks) << "\n";
    os << "base_channels=" << c.base_channels << "\n";
    os << "heads=" << join_ints(c.heads) << "\n";
    os << "ffn_expansion=" << c.ffn_expansion << "\n";
    os << "window=" << c.window << "\n";
    os << "gdd_groups=" << c.gdd_groups << "\n";
    os << "gdd_kernel=" << c.gdd_kernel << "\n";
    os << "use_hpm=" << (c.use_hpm ? 1 : 0) << "\n";
    os << "use_lpm=" << (c.use_lpm ? 1 : 0) << "\n";
    os << "single_gdd=" << (c.single_gdd ? 1 : 0) << "\n";
    os << "native_patch=" << c.native_patch << "\n";
    os << "seed=" << seed << "\n";
    os << "precision=" << precision << "\n";
    os << "iteration=" << meta.iteration << "\n";
    os << "rng_counter=" << meta.rng_counter << "\n";
    return os.str();
}

CheckpointHeader parse_config_block(const std::string& block) {
    CheckpointHeader h;
    std::stringstream ss(block);
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("malformed checkpoint config line: " + line);
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "levels")
            h.config.levels = std::stoi(val);
        else if (key == "blocks")
            h.config.blocks = split_ints(val);
        else if (key == "base_channels")
            h.config.base_channels = std::stoi(val);
        else if (key == "heads")
            h.config.heads = split_ints(val);
        else if (key == "ffn_expansion")
            h.config.ffn_expansion = std::stoi(val);
        else if (key == "window")
            h.config.window = std::stoi(val);
        else if (key == "gdd_groups")
            h.config.gdd_groups = std::stoi(val);
        else if (key == "gdd_kernel")
            h.config.gdd_kernel = std::stoi(val);
        else if (key == "use_hpm")
            h.config.use_hpm = val == "1";
        else if (key == "use_lpm")
            h.config.use_lpm = val == "1";
        else if (key == "single_gdd")
            h.config.single_gdd = val == "1";
        else if (key == "native_patch")
            h.config.native_patch = std::stoll(val);
        else if (key == "seed")
            h.seed = std::stoull(val);
        else if (key == "precision")
            h.precision = val;
        else if (key == "iteration")
            h.meta.iteration = std::stoll(val);
        else if (key == "rng_counter")
            h.meta.rng_counter = std::stoull(val);
        else
            throw FormatError("unknown checkpoint config key: " + key);
    }
    return h;
}

template <typename T>
constexpr uint8_t dtype_code() {
    return sizeof(T) == 4 ? 1 : 2;
}

const char* dtype_name(uint8_t code) { return code == 1 ? "f32" : "f64"; }

template <typename T>
void append_record(std::string& payload, const std::string& name, const Shape& shape,
                   std::span<const T> data) {
    put_u32(payload, uint32_t(name.size()));
    payload += name;
    payload.push_back(char(dtype_code<T>()));
    put_u32(payload, uint32_t(shape.size()));
    for (int64_t d : shape) put_u64(payload, uint64_t(d));
    size_t at = payload.size();
    payload.resize(at + data.size() * sizeof(T));
    std::memcpy(payload.data() + at, data.data(), data.size() * sizeof(T));
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct RawRecord {
    std::string name;
    uint8_t dtype;
    Shape shape;
    size_t data_off;
    size_t data_len;  // bytes
};

// Validates framing and the CRC; returns the config block and records.
std::string parse_checkpoint(const std::string& blob, std::vector<RawRecord>& records) {
    if (blob.size() < 8 || std::memcmp(blob.data(), kMagic, 4) != 0)
        throw FormatError("bad magic; not a checkpoint file");
    Reader r{reinterpret_cast<const uint8_t*>(blob.data()), blob.size()};
    r.off = 4;
    uint32_t version = r.u32();
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    size_t payload_start = r.off;
    if (blob.size() < payload_start + 4) throw FormatError("truncated checkpoint file");
    size_t crc_off = blob.size() - 4;
    uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i) stored_crc |= uint32_t(uint8_t(blob[crc_off + size_t(i)])) << (8 * i);
    uint32_t crc = uint32_t(
        crc32(0, reinterpret_cast<const Bytef*>(blob.data() + payload_start), uInt(crc_off - payload_start)));
    if (crc != stored_crc) throw FormatError("checksum mismatch; checkpoint corrupt or truncated");

    r.n = crc_off;  // confine reads to the payload
    uint64_t cfg_len = r.u64();
    std::string cfg = r.bytes(size_t(cfg_len));
    uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        RawRecord rec;
        uint32_t name_len = r.u32();
        rec.name = r.bytes(name_len);
        rec.dtype = r.u8();
        if (rec.dtype != 1 && rec.dtype != 2) throw FormatError("tensor " + rec.name + ": unknown dtype");
        uint32_t rank = r.u32();
        int64_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            rec.shape.push_back(int64_t(r.u64()));
            numel *= rec.shape.back();
        }
        size_t elem = rec.dtype == 1 ? 4 : 8;
        rec.data_off = r.off;
        rec.data_len = size_t(numel) * elem;
        r.need(rec.data_len);
        r.off += rec.data_len;
        records.push_back(std::move(rec));
    }
    if (r.off != r.n) throw FormatError("trailing bytes after tensor records");
    return cfg;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, FproModel<T>& model, const CheckpointMeta& meta,
                     const NamedVectors<T>& optimizer_state) {
    std::string payload;
    std::string cfg = config_block(model.config(), model.seed(),
                                   dtype_code<T>() == 1 ? "f32" : "f64", meta);
    put_u64(payload, cfg.size());
    payload += cfg;

    const auto& params = model.params().params();
    const auto& buffers = model.params().buffers();
    put_u32(payload, uint32_t(params.size() + buffers.size() + optimizer_state.size()));
    for (const auto& [name, t] : params) append_record<T>(payload, name, t.shape(), t.data());
    for (const auto& [name, t] : buffers) append_record<T>(payload, name, t.shape(), t.data());
    for (const auto& [name, vec] : optimizer_state)
        append_record<T>(payload, "opt." + name, {int64_t(vec.size())},
                         std::span<const T>(vec.data(), vec.size()));

    std::string blob(kMagic, 4);
    put_u32(blob, kVersion);
    blob += payload;
    uint32_t crc =
        uint32_t(crc32(0, reinterpret_cast<const Bytef*>(payload.data()), uInt(payload.size())));
    put_u32(blob, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint: " + path);
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out) throw FormatError("short write to checkpoint: " + path);
}

CheckpointHeader read_checkpoint_header(const std::string& path) {
    std::string blob = read_file(path);
    std::vector<RawRecord> records;
    std::string cfg = parse_checkpoint(blob, records);
    return parse_config_block(cfg);
}

template <typename T>
FproModel<T> load_checkpoint(const std::string& path, CheckpointMeta* meta,
                             NamedVectors<T>* optimizer_state) {
    std::string blob = read_file(path);
    std::vector<RawRecord> records;
    std::string cfg_text = parse_checkpoint(blob, records);
    CheckpointHeader header = parse_config_block(cfg_text);

    const char* want_prec = dtype_code<T>() == 1 ? "f32" : "f64";
    if (header.precision != want_prec)
        throw FormatError("checkpoint precision " + header.precision + " does not match requested " +
                          want_prec);
    if (meta) *meta = header.meta;

    FproModel<T> model(header.config, header.seed);

    auto take = [&](const std::string& name, Tensor<T>& dst) {
        for (auto& rec : records) {
            if (rec.name != name) continue;
            if (rec.dtype != dtype_code<T>())
                throw FormatError("tensor " + name + " stored as " + dtype_name(rec.dtype) +
                                  ", expected " + dtype_name(dtype_code<T>()));
            if (rec.shape != dst.shape())
                throw ShapeError("tensor " + name + " has shape " + shape_str(rec.shape) +
                                 ", model expects " + shape_str(dst.shape()));
            std::memcpy(dst.raw_data().data(), blob.data() + rec.data_off, rec.data_len);
            rec.name.clear();  // consumed
            return;
        }
        throw FormatError("checkpoint is missing tensor " + name);
    };

    for (const auto& [name, t] : model.params().params()) {
        Tensor<T> dst = t;
        take(name, dst);
    }
    for (const auto& [name, t] : model.params().buffers()) {
        Tensor<T> dst = t;
        take(name, dst);
    }
    for (const auto& rec : records) {
        if (rec.name.empty()) continue;
        if (rec.name.rfind("opt.", 0) == 0) {
            if (optimizer_state) {
                std::vector<T> vec(rec.data_len / sizeof(T));
                std::memcpy(vec.data(), blob.data() + rec.data_off, rec.data_len);
                optimizer_state->emplace_back(rec.name.substr(4), std::move(vec));
            }
            continue;
        }
        throw FormatError("checkpoint contains unknown tensor " + rec.name);
    }
    return model;
}

template void save_checkpoint<float>(const std::string&, FproModel<float>&, const CheckpointMeta&,
                                     const NamedVectors<float>&);
template void save_checkpoint<double>(const std::string&, FproModel<double>&, const CheckpointMeta&,
                                      const NamedVectors<double>&);
template FproModel<float> load_checkpoint<float>(const std::string&, CheckpointMeta*,
                                                 NamedVectors<float>*);
template FproModel<double> load_checkpoint<double>(const std::string&, CheckpointMeta*,
                                                   NamedVectors<double>*);

}  // namespace fpro
