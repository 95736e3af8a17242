#include "eib/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <system_error>

#include "eib/numerics/precision.hpp"

namespace eib {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const char* to_string(DType d) {
    switch (d) {
        case DType::F32: return "f32";
        case DType::F64: return "f64";
        case DType::I8: return "i8";
    }
    return "?";
}

DType StoredTensor::dtype() const {
    if (std::holds_alternative<std::vector<float>>(data)) return DType::F32;
    if (std::holds_alternative<std::vector<double>>(data)) return DType::F64;
    return DType::I8;
}

const StoredTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

const StoredTensor& Checkpoint::at(const std::string& name) const {
    if (const StoredTensor* t = find(name)) return *t;
    fail(ErrorKind::Format, "checkpoint has no tensor '" + name + "'");
}

namespace {

std::size_t element_size(DType d) {
    switch (d) {
        case DType::F32: return 4;
        case DType::F64: return 8;
        case DType::I8: return 1;
    }
    return 0;
}

std::size_t element_count(const StoredTensor& t) {
    return std::visit([](const auto& v) { return v.size(); }, t.data);
}

template <typename T>
void append_pod(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

[[noreturn]] void format_error(std::size_t offset, const std::string& what) {
    fail(ErrorKind::Format, what + " (byte offset " + std::to_string(offset) + ")");
}

DType parse_dtype(const std::string& s, std::size_t offset) {
    if (s == "f32") return DType::F32;
    if (s == "f64") return DType::F64;
    if (s == "i8") return DType::I8;
    format_error(offset, "unknown dtype '" + s + "'");
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    json header;
    header["metadata"] = ckpt.metadata;
    header["tensors"] = json::array();
    std::uint64_t offset = 0;
    for (const StoredTensor& t : ckpt.tensors) {
        const std::size_t n = element_count(t);
        if (n != numel(t.shape)) fail(ErrorKind::Format, "tensor '" + t.name + "' shape does not match its data");
        json e;
        e["name"] = t.name;
        e["dtype"] = to_string(t.dtype());
        e["shape"] = t.shape;
        e["offset"] = offset;
        if (t.dtype() == DType::I8) e["step"] = t.step;
        header["tensors"].push_back(std::move(e));
        offset += n * element_size(t.dtype());
    }
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(16 + text.size() + offset);
    out.insert(out.end(), {'E', 'I', 'B', 'T'});
    append_pod<std::uint32_t>(out, kCheckpointVersion);
    append_pod<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const StoredTensor& t : ckpt.tensors) {
        std::visit(
            [&](const auto& v) {
                const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
                out.insert(out.end(), p, p + v.size() * sizeof(v[0]));
            },
            t.data);
    }
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 16) format_error(bytes.size(), "file shorter than the fixed preamble");
    if (std::memcmp(bytes.data(), "EIBT", 4) != 0) format_error(0, "bad magic");
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (version != kCheckpointVersion) format_error(4, "unsupported format version " + std::to_string(version));
    std::uint64_t header_len;
    std::memcpy(&header_len, bytes.data() + 8, 8);
    if (header_len > bytes.size() - 16) format_error(bytes.size(), "truncated header");

    json header;
    try {
        header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        format_error(16, std::string("malformed header: ") + e.what());
    }

    const std::size_t blob = 16 + header_len;
    Checkpoint ckpt;
    try {
        ckpt.metadata = header.at("metadata");
        std::uint64_t expected = 0;
        for (const json& e : header.at("tensors")) {
            StoredTensor t;
            t.name = e.at("name").get<std::string>();
            t.shape = e.at("shape").get<Shape>();
            const DType d = parse_dtype(e.at("dtype").get<std::string>(), 16);
            const std::uint64_t off = e.at("offset").get<std::uint64_t>();
            if (off != expected) format_error(16, "tensor '" + t.name + "' has a non-contiguous offset");
            const std::size_t n = numel(t.shape);
            const std::uint64_t nbytes = n * element_size(d);
            if (blob + off + nbytes > bytes.size()) {
                format_error(bytes.size(), "truncated data for tensor '" + t.name + "'");
            }
            const std::uint8_t* src = bytes.data() + blob + off;
            switch (d) {
                case DType::F32: {
                    std::vector<float> v(n);
                    std::memcpy(v.data(), src, nbytes);
                    t.data = std::move(v);
                    break;
                }
                case DType::F64: {
                    std::vector<double> v(n);
                    std::memcpy(v.data(), src, nbytes);
                    t.data = std::move(v);
                    break;
                }
                case DType::I8: {
                    std::vector<std::int8_t> v(n);
                    std::memcpy(v.data(), src, nbytes);
                    for (std::int8_t c : v)
                        if (c == -128) format_error(blob + off, "i8 code -128 in tensor '" + t.name + "'");
                    t.data = std::move(v);
                    t.step = e.at("step").get<std::string>();
                    break;
                }
            }
            expected += nbytes;
            ckpt.tensors.push_back(std::move(t));
        }
        if (blob + expected != bytes.size()) format_error(blob + expected, "trailing bytes after tensor data");
    } catch (const json::exception& e) {
        format_error(16, std::string("malformed header: ") + e.what());
    }
    return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) fail(ErrorKind::Format, "cannot open " + tmp.string() + " for writing");
        os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!os) fail(ErrorKind::Format, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::Format, "cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return decode_checkpoint(bytes);
    } catch (const Error& e) {
        fail(ErrorKind::Format, path.string() + ": " + e.what());
    }
}

json spec_to_json(const ModelSpec& s) {
    return json{{"vocab_size", s.vocab_size},
                {"max_seq_len", s.max_seq_len},
                {"embed_dim", s.embed_dim},
                {"hidden_dim", s.hidden_dim},
                {"intermediate_dim", s.intermediate_dim},
                {"num_layers", s.num_layers},
                {"num_heads", s.num_heads},
                {"share_layers", s.share_layers},
                {"factorized_embedding", s.factorized_embedding},
                {"num_classes", s.num_classes},
                {"seed", s.seed}};
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec s;
    s.vocab_size = j.at("vocab_size").get<std::size_t>();
    s.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    s.embed_dim = j.at("embed_dim").get<std::size_t>();
    s.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    s.intermediate_dim = j.at("intermediate_dim").get<std::size_t>();
    s.num_layers = j.at("num_layers").get<std::size_t>();
    s.num_heads = j.at("num_heads").get<std::size_t>();
    s.share_layers = j.at("share_layers").get<bool>();
    s.factorized_embedding = j.at("factorized_embedding").get<bool>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

StoredTensor store_real(const std::string& name, const Tensor& t) {
    StoredTensor st;
    st.name = name;
    st.shape = t.shape();
    if (precision() == Precision::F32) {
        std::vector<float> v(t.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(t[i]);
        st.data = std::move(v);
    } else {
        st.data = t.vec();
    }
    return st;
}

Tensor load_real(const StoredTensor& st) {
    if (const auto* f = std::get_if<std::vector<float>>(&st.data)) {
        return Tensor(st.shape, std::vector<Real>(f->begin(), f->end()));
    }
    if (const auto* d = std::get_if<std::vector<double>>(&st.data)) return Tensor(st.shape, *d);
    fail(ErrorKind::Format, "tensor '" + st.name + "' is not real-valued");
}

Checkpoint model_to_checkpoint(const TransformerModel& model) {
    Checkpoint c;
    c.metadata["kind"] = "float";
    c.metadata["spec"] = spec_to_json(model.spec);
    c.metadata["head_uses_projector"] = model.head_uses_projector;
    c.metadata["has_projector"] = model.projector.has_value();
    c.metadata["head_dim"] = model.head_dim();
    if (model.projector) c.metadata["projector_dim"] = model.projector->out();
    for (const Parameter* p : model.parameters()) c.tensors.push_back(store_real(p->name, p->value));
    return c;
}

TransformerModel model_from_checkpoint(const Checkpoint& c) {
    try {
        if (c.metadata.at("kind").get<std::string>() != "float") {
            fail(ErrorKind::Format, "checkpoint does not hold a float model");
        }
        const ModelSpec spec = spec_from_json(c.metadata.at("spec"));
        TransformerModel m = build_model(spec);
        const std::size_t head_dim = c.metadata.at("head_dim").get<std::size_t>();
        if (c.metadata.at("has_projector").get<bool>()) {
            // an alignment-only projector (KD) is as wide as the teacher, not the head
            const std::size_t pd = c.metadata.value("projector_dim", head_dim);
            m.projector = Linear{Parameter{"projector.weight", Tensor({spec.hidden_dim, pd})},
                                 Parameter{"projector.bias", Tensor({pd})}};
        }
        m.head_uses_projector = c.metadata.at("head_uses_projector").get<bool>();
        m.pooler = Linear{Parameter{"head.pooler.weight", Tensor({head_dim, head_dim})},
                          Parameter{"head.pooler.bias", Tensor({head_dim})}};
        m.classifier = Linear{Parameter{"head.classifier.weight", Tensor({head_dim, spec.num_classes})},
                              Parameter{"head.classifier.bias", Tensor({spec.num_classes})}};
        const auto params = m.parameters();
        if (params.size() != c.tensors.size()) fail(ErrorKind::Format, "tensor count does not match the model");
        for (Parameter* p : params) {
            const StoredTensor& st = c.at(p->name);
            if (st.shape != p->value.shape()) {
                fail(ErrorKind::Format, "tensor '" + p->name + "' has shape " + shape_string(st.shape) +
                                            ", expected " + shape_string(p->value.shape()));
            }
            p->value = load_real(st);
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, std::string("bad checkpoint metadata: ") + e.what());
    }
}

}  // namespace eib
