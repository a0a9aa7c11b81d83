#include "flexi/checkpoint.hpp"

#include "flexi/report_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace flexi {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void put_f64(std::string& out, double x) {
    auto bits = std::bit_cast<std::uint64_t>(x);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    char buf[8];
    std::memcpy(buf, &bits, 8);
    out.append(buf, 8);
}

double get_f64(const char* p) {
    std::uint64_t bits;
    std::memcpy(&bits, p, 8);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    return std::bit_cast<double>(bits);
}

[[noreturn]] void fail(CheckpointErrc code, const std::string& msg) {
    throw CheckpointError(code, "checkpoint: " + msg);
}

std::vector<std::string> split_words(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

std::size_t parse_count(const std::string& s, const std::string& what) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) fail(CheckpointErrc::bad_header, "bad " + what + " '" + s + "'");
    return v;
}

double parse_real(const std::string& s, const std::string& what) {
    try {
        return parse_double_exact(s);
    } catch (const std::exception&) {
        fail(CheckpointErrc::bad_header, "bad " + what + " '" + s + "'");
    }
}

struct BlockHeader {
    BlockKindTag kind = BlockKindTag::native;
    std::size_t base = 0;
    std::size_t rank = 0;
    double attn_eps = 0.0;
    double mlp_eps = 0.0;
};

Model skeleton(const ModelConfig& cfg, const std::vector<BlockHeader>& headers) {
    Model m;
    m.config = cfg;
    m.tok_emb = Matrix(cfg.vocab_size, cfg.d_model);
    m.pos_emb = Matrix(cfg.max_seq_len, cfg.d_model);
    m.final_gain.assign(cfg.d_model, 0.0);
    m.unembed = Matrix(cfg.d_model, cfg.vocab_size);
    for (const BlockHeader& h : headers) {
        if (h.kind == BlockKindTag::native) {
            m.blocks.emplace_back(NativeBlock{BlockWeights::zeros(cfg)});
            continue;
        }
        AdaptedBlock a;
        a.base_index = h.base;
        const BlockWeights shapes = BlockWeights::zeros(cfg);
        for (Role r : kRoles) {
            a.adapter(r).a = Matrix(shapes.weight(r).rows(), h.rank);
            a.adapter(r).b = Matrix(h.rank, shapes.weight(r).cols());
        }
        a.attn_norm = OutputNorm{std::vector<double>(cfg.d_model), h.attn_eps};
        a.mlp_norm = OutputNorm{std::vector<double>(cfg.d_model), h.mlp_eps};
        if (h.kind == BlockKindTag::shared) {
            m.blocks.emplace_back(SharedBlock{std::move(a)});
        } else {
            m.blocks.emplace_back(RepeatedBlock{std::move(a)});
        }
    }
    return m;
}

}  // namespace

std::string serialize_checkpoint(const Model& model) {
    model.validate();
    const ModelConfig& c = model.config;
    std::string out;
    out += kCheckpointMagic;
    out += '\n';
    out += "config " + std::to_string(c.n_layers) + " " + std::to_string(c.d_model) + " " +
           std::to_string(c.n_heads) + " " + std::to_string(c.d_ff) + " " +
           std::to_string(c.vocab_size) + " " + std::to_string(c.max_seq_len) + " " +
           format_double_exact(c.norm_eps) + "\n";
    out += "blocks " + std::to_string(model.blocks.size()) + "\n";
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        const Block& b = model.blocks[i];
        out += "block " + std::to_string(i) + " " + std::string(kind_name(kind_of(b)));
        if (const AdaptedBlock* a = as_adapted(b)) {
            out += " " + std::to_string(a->base_index) + " " + std::to_string(a->rank()) + " " +
                   format_double_exact(a->attn_norm.eps) + " " + format_double_exact(a->mlp_norm.eps);
        }
        out += '\n';
    }
    const auto params = list_params(model);
    out += "tensors " + std::to_string(params.size()) + "\n";
    std::size_t offset = 0;
    for (const auto& p : params) {
        out += "tensor " + p.name + " " + std::to_string(p.rows) + " " + std::to_string(p.cols) + " " +
               std::to_string(offset) + "\n";
        offset += p.values.size() * 8;
    }
    out += "end\n";
    out.reserve(out.size() + offset);
    for (const auto& p : params)
        for (double x : p.values) put_f64(out, x);
    return out;
}

Model deserialize_checkpoint(const std::string& bytes) {
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) fail(CheckpointErrc::truncated, "manifest ends before 'end' line");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };

    if (bytes.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0) {
        fail(CheckpointErrc::bad_header, "missing magic string");
    }
    if (next_line() != kCheckpointMagic) fail(CheckpointErrc::bad_header, "bad magic line");

    auto cfg_words = split_words(next_line());
    if (cfg_words.size() != 8 || cfg_words[0] != "config") fail(CheckpointErrc::bad_header, "bad config line");
    ModelConfig cfg;
    cfg.n_layers = parse_count(cfg_words[1], "n_layers");
    cfg.d_model = parse_count(cfg_words[2], "d_model");
    cfg.n_heads = parse_count(cfg_words[3], "n_heads");
    cfg.d_ff = parse_count(cfg_words[4], "d_ff");
    cfg.vocab_size = parse_count(cfg_words[5], "vocab_size");
    cfg.max_seq_len = parse_count(cfg_words[6], "max_seq_len");
    cfg.norm_eps = parse_real(cfg_words[7], "norm_eps");
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        fail(CheckpointErrc::bad_header, e.what());
    }

    auto count_words = split_words(next_line());
    if (count_words.size() != 2 || count_words[0] != "blocks") fail(CheckpointErrc::bad_header, "bad blocks line");
    const std::size_t n_blocks = parse_count(count_words[1], "block count");
    if (n_blocks != cfg.n_layers) fail(CheckpointErrc::bad_header, "block count disagrees with n_layers");

    std::vector<BlockHeader> headers(n_blocks);
    for (std::size_t i = 0; i < n_blocks; ++i) {
        auto w = split_words(next_line());
        if (w.size() < 3 || w[0] != "block" || parse_count(w[1], "block index") != i) {
            fail(CheckpointErrc::bad_header, "bad block line " + std::to_string(i));
        }
        BlockHeader& h = headers[i];
        if (w[2] == "native" && w.size() == 3) {
            h.kind = BlockKindTag::native;
        } else if ((w[2] == "shared" || w[2] == "repeated") && w.size() == 7) {
            h.kind = w[2] == "shared" ? BlockKindTag::shared : BlockKindTag::repeated;
            h.base = parse_count(w[3], "base index");
            h.rank = parse_count(w[4], "rank");
            h.attn_eps = parse_real(w[5], "attn eps");
            h.mlp_eps = parse_real(w[6], "mlp eps");
            if (h.rank == 0) fail(CheckpointErrc::bad_header, "zero adapter rank in block " + std::to_string(i));
        } else {
            fail(CheckpointErrc::bad_header, "bad block kind in block " + std::to_string(i));
        }
    }
    for (std::size_t i = 0; i < n_blocks; ++i) {
        const BlockHeader& h = headers[i];
        if (h.kind == BlockKindTag::native) continue;
        if (h.base >= n_blocks || headers[h.base].kind != BlockKindTag::native) {
            fail(CheckpointErrc::dangling_base, "block " + std::to_string(i) + " uses base " +
                                                    std::to_string(h.base) + " which is not a native block");
        }
    }

    Model model = skeleton(cfg, headers);
    auto params = list_params(model);

    auto tcount = split_words(next_line());
    if (tcount.size() != 2 || tcount[0] != "tensors") fail(CheckpointErrc::bad_header, "bad tensors line");
    if (parse_count(tcount[1], "tensor count") != params.size()) {
        fail(CheckpointErrc::shape_mismatch, "expected " + std::to_string(params.size()) + " tensors");
    }
    std::size_t expected_offset = 0;
    for (const auto& p : params) {
        auto w = split_words(next_line());
        if (w.size() != 5 || w[0] != "tensor") fail(CheckpointErrc::bad_header, "bad tensor line");
        if (w[1] != p.name) fail(CheckpointErrc::shape_mismatch, "expected tensor " + p.name + ", found " + w[1]);
        const std::size_t rows = parse_count(w[2], "rows");
        const std::size_t cols = parse_count(w[3], "cols");
        if (rows != p.rows || cols != p.cols) {
            fail(CheckpointErrc::shape_mismatch, p.name + " is " + w[2] + "x" + w[3] + ", expected " +
                                                     std::to_string(p.rows) + "x" + std::to_string(p.cols));
        }
        if (parse_count(w[4], "offset") != expected_offset) {
            fail(CheckpointErrc::offset_mismatch, p.name + " at offset " + w[4] + ", expected " +
                                                      std::to_string(expected_offset));
        }
        expected_offset += p.values.size() * 8;
    }
    if (next_line() != "end") fail(CheckpointErrc::bad_header, "missing 'end' line");

    const std::size_t payload = bytes.size() - pos;
    if (payload < expected_offset) {
        fail(CheckpointErrc::truncated, "payload has " + std::to_string(payload) + " bytes, expected " +
                                            std::to_string(expected_offset));
    }
    if (payload > expected_offset) {
        fail(CheckpointErrc::offset_mismatch, "trailing bytes after payload");
    }
    const char* data = bytes.data() + pos;
    for (auto& p : params) {
        for (double& x : p.values) {
            x = get_f64(data);
            data += 8;
        }
    }
    try {
        model.validate();
    } catch (const std::invalid_argument& e) {
        fail(CheckpointErrc::shape_mismatch, e.what());
    }
    return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(CheckpointErrc::io, "cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(CheckpointErrc::io, "write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(CheckpointErrc::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

void save_tokens(std::span<const Token> tokens, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (Token t : tokens) {
        const unsigned char b[4] = {static_cast<unsigned char>(t), static_cast<unsigned char>(t >> 8),
                                    static_cast<unsigned char>(t >> 16), static_cast<unsigned char>(t >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
}

std::vector<Token> load_tokens(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    if (bytes.size() % 4 != 0) throw std::runtime_error(path.string() + ": length is not a multiple of 4");
    std::vector<Token> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto* b = reinterpret_cast<const unsigned char*>(bytes.data() + 4 * i);
        out[i] = Token(b[0]) | Token(b[1]) << 8 | Token(b[2]) << 16 | Token(b[3]) << 24;
    }
    return out;
}

}  // namespace flexi
