#include "perrec/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace perrec {

namespace {
constexpr char kMagic[4] = {'P', 'R', 'C', '1'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) {
    Entry e;
    e.shape = t.shape();
    e.data = t.values();
    tensors[name] = std::move(e);
}

void Checkpoint::put_all(const std::vector<std::pair<std::string, Tensor>>& named) {
    for (const auto& [name, t] : named) put(name, t);
}

const Checkpoint::Entry& Checkpoint::get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("checkpoint: missing tensor '" + name + "'");
    return it->second;
}

void Checkpoint::copy_into(const std::string& name, const Tensor& t) const {
    const Entry& e = get(name);
    if (e.shape != t.shape())
        throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_str(e.shape) +
                        ", expected " + shape_str(t.shape()));
    std::copy(e.data.begin(), e.data.end(), t.data());
}

void Checkpoint::copy_all_into(const std::vector<std::pair<std::string, Tensor>>& named) const {
    for (const auto& [name, t] : named) copy_into(name, t);
}

int64_t Checkpoint::total_params() const {
    int64_t n = 0;
    for (const auto& [name, e] : tensors) n += static_cast<int64_t>(e.data.size());
    return n;
}

int64_t Checkpoint::prefix_params(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [name, e] : tensors)
        if (name.rfind(prefix, 0) == 0) n += static_cast<int64_t>(e.data.size());
    return n;
}

void Checkpoint::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write(kMagic, 4);
    write_pod(out, kVersion);
    for (const auto& [name, e] : tensors) {
        write_pod(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(out, static_cast<uint32_t>(e.shape.size()));
        for (int64_t d : e.shape) write_pod(out, static_cast<uint64_t>(d));
        out.write(reinterpret_cast<const char*>(e.data.data()),
                  static_cast<std::streamsize>(e.data.size() * sizeof(double)));
    }
    if (!out) throw DataError("short write on checkpoint " + path);
    out.close();

    std::ofstream meta(path + ".meta.json");
    if (!meta) throw DataError("cannot write checkpoint meta " + path + ".meta.json");
    meta << (meta_json.empty() ? std::string("{}") : meta_json) << "\n";
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("checkpoint " + path + ": bad magic");
    const uint32_t version = read_pod<uint32_t>(in);
    if (version != kVersion)
        throw DataError("checkpoint " + path + ": unsupported version " + std::to_string(version));

    Checkpoint ck;
    while (true) {
        uint32_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (in.eof()) break;
        if (!in) throw DataError("checkpoint " + path + ": truncated record");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const uint32_t rank = read_pod<uint32_t>(in);
        Entry e;
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            const auto d = static_cast<int64_t>(read_pod<uint64_t>(in));
            e.shape.push_back(d);
            numel *= d;
        }
        e.data.resize(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char*>(e.data.data()),
                static_cast<std::streamsize>(e.data.size() * sizeof(double)));
        if (!in) throw DataError("checkpoint " + path + ": truncated tensor '" + name + "'");
        ck.tensors[name] = std::move(e);
    }

    std::ifstream meta(path + ".meta.json");
    if (meta) {
        std::string s((std::istreambuf_iterator<char>(meta)), std::istreambuf_iterator<char>());
        while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
        ck.meta_json = s;
    } else {
        ck.meta_json = "{}";
    }
    return ck;
}

}  // namespace perrec
