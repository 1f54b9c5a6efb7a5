#include <cstring>
#include <fstream>

#include "aianet/training.hpp"

namespace aianet {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}
void put_u64(std::string& out, std::uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}
void put_f64(std::string& out, double v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

struct Reader {
    const std::string& in;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t n) const {
        if (pos + n > in.size()) throw IoError("truncated checkpoint: " + path);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, in.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v;
        std::memcpy(&v, in.data() + pos, 8);
        pos += 8;
        return v;
    }
    double f64() {
        need(8);
        double v;
        std::memcpy(&v, in.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = in.substr(pos, n);
        pos += n;
        return s;
    }
};

void append_entry(std::string& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    serialize_tensor(t, out);
}

}  // namespace

// AIA1 layout (little-endian): magic "AIA1", u32 version, u32 entry count,
// entries (u32 name length, name, TSR1 tensor) covering parameters then
// running buffers, u8 optimizer flag, then when set u64 step plus one (m, v)
// TSR1 pair per parameter entry in order, u64 next epoch, f64 best val NMSE.
void save_checkpoint(const std::string& path, const AiaNet& model, const AdamWState* opt,
                     std::uint64_t next_epoch, double best_val_nmse_db) {
    const auto& params = model.params();
    const auto& buffers = model.buffers();
    std::string out;
    out.append("AIA1", 4);
    put_u32(out, 1);
    put_u32(out, static_cast<std::uint32_t>(params.size() + buffers.size()));
    for (std::size_t i = 0; i < params.size(); ++i)
        append_entry(out, params.entry(i).name, params.entry(i).tensor);
    for (std::size_t i = 0; i < buffers.size(); ++i)
        append_entry(out, buffers.entry(i).name, buffers.entry(i).tensor);
    const bool has_opt = opt != nullptr && opt->m.size() == params.size();
    out.push_back(has_opt ? 1 : 0);
    if (has_opt) {
        put_u64(out, opt->step);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor m({opt->m[i].size()}, opt->m[i]);
            Tensor v({opt->v[i].size()}, opt->v[i]);
            serialize_tensor(m, out);
            serialize_tensor(v, out);
        }
    }
    put_u64(out, next_epoch);
    put_f64(out, best_val_nmse_db);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write: " + path);
}

void load_checkpoint(const std::string& path, AiaNet& model, AdamWState* opt,
                     std::uint64_t* next_epoch, double* best_val_nmse_db) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (in.size() < 12 || std::memcmp(in.data(), "AIA1", 4) != 0)
        throw IoError("not an AIA1 checkpoint: " + path);
    Reader r{in, 4, path};
    const std::uint32_t version = r.u32();
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t count = r.u32();

    auto& params = model.params();
    auto& buffers = model.buffers();
    std::size_t loaded = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.str(name_len);
        Tensor t = deserialize_tensor<real_t>(in, r.pos);
        ParamStore* store = params.contains(name) ? &params : buffers.contains(name) ? &buffers : nullptr;
        if (!store)
            throw IoError("checkpoint entry '" + name + "' does not match the model (" + path + ")");
        auto& dst = store->at(name);
        if (dst.shape != t.shape)
            throw IoError("checkpoint entry '" + name + "' has shape " + t.shape_str() +
                          ", model expects " + dst.shape_str());
        dst.data = std::move(t.data);
        ++loaded;
    }
    if (loaded != params.size() + buffers.size())
        throw IoError("checkpoint is missing model entries: " + path);

    r.need(1);
    const bool has_opt = in[r.pos++] != 0;
    if (has_opt) {
        const std::uint64_t step = r.u64();
        if (opt) {
            opt->step = step;
            opt->m.resize(params.size());
            opt->v.resize(params.size());
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor m = deserialize_tensor<real_t>(in, r.pos);
            Tensor v = deserialize_tensor<real_t>(in, r.pos);
            if (opt) {
                if (m.numel() != params.entry(i).tensor.numel())
                    throw IoError("optimizer moment size mismatch in " + path);
                opt->m[i] = std::move(m.data);
                opt->v[i] = std::move(v.data);
            }
        }
    } else if (opt) {
        opt->step = 0;
        opt->m.clear();
        opt->v.clear();
    }
    const std::uint64_t epoch = r.u64();
    const double best = r.f64();
    if (next_epoch) *next_epoch = epoch;
    if (best_val_nmse_db) *best_val_nmse_db = best;
    if (r.pos != in.size()) throw IoError("trailing bytes in checkpoint: " + path);
}

}  // namespace aianet
