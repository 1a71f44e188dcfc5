#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vitclt/io.hpp"
#include "vitclt/numerics.hpp"
#include "vitclt/rng.hpp"

namespace vitclt {

// CLTACTS1 layout (all little-endian):
//
//   offset  size  field
//        0     8  magic "CLTACTS1"
//        8     4  version (u32)
//       12     4  num_samples (u32)
//       16     2  num_layers (u16)
//       18     2  tokens_per_sample (u16)
//       20     4  hidden_dim (u32)
//       24     1  label_present (u8, 0 or 1)
//       25     1  dtype (u8, 0 = f32)
//       26     2  reserved, zero
//       28        labels: num_samples x u32, only when label_present
//                 samples: per sample, L blocks of x then L blocks of y,
//                 each block T x D f32 row-major (token-major)
inline constexpr std::array<char, 8> kTraceMagic = {'C', 'L', 'T', 'A', 'C', 'T', 'S', '1'};
inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr std::size_t kTraceHeaderBytes = 28;

struct TraceHeader {
    std::uint32_t version = kTraceVersion;
    std::uint32_t num_samples = 0;
    std::uint32_t num_layers = 0;
    std::uint32_t tokens = 0;
    std::uint32_t hidden = 0;
    bool label_present = false;
    std::uint8_t dtype = 0;

    std::size_t block_floats() const { return std::size_t{tokens} * hidden; }
    std::size_t sample_bytes() const { return 2 * std::size_t{num_layers} * block_floats() * sizeof(float); }
    std::size_t labels_offset() const { return kTraceHeaderBytes; }
    std::size_t samples_offset() const {
        return kTraceHeaderBytes + (label_present ? std::size_t{num_samples} * 4 : 0);
    }
    std::size_t file_bytes() const { return samples_offset() + std::size_t{num_samples} * sample_bytes(); }

    void validate() const {
        if (num_layers < 1) throw std::invalid_argument("trace header: num_layers must be >= 1");
        if (tokens < 2) throw std::invalid_argument("trace header: tokens must be >= 2 (CLS + patches)");
        if (hidden < 1) throw std::invalid_argument("trace header: hidden_dim must be >= 1");
        if (num_layers > 0xffff || tokens > 0xffff)
            throw std::invalid_argument("trace header: num_layers and tokens must fit in u16");
        if (dtype != 0) throw std::invalid_argument("trace header: unsupported dtype " + std::to_string(dtype));
    }

    bool operator==(const TraceHeader&) const = default;
};

/// One sample: LN2 inputs x[l] and MLP outputs y[l], each tokens x hidden.
/// Token row 0 is the CLS token.
struct ActivationTrace {
    std::vector<Matrix> x;
    std::vector<Matrix> y;
    std::optional<std::uint32_t> label;

    std::size_t layers() const { return x.size(); }
    bool operator==(const ActivationTrace&) const = default;
};

inline void check_trace_matches(const TraceHeader& h, const ActivationTrace& t) {
    if (t.x.size() != h.num_layers || t.y.size() != h.num_layers)
        throw std::invalid_argument("trace layer count does not match header");
    for (std::size_t l = 0; l < h.num_layers; ++l) {
        for (const Matrix* m : {&t.x[l], &t.y[l]}) {
            if (m->rows() != h.tokens || m->cols() != h.hidden)
                throw std::invalid_argument("trace block shape does not match header at layer " + std::to_string(l));
        }
    }
    if (h.label_present && !t.label) throw std::invalid_argument("header declares labels but trace has none");
}

inline std::vector<unsigned char> encode_trace_header(const TraceHeader& h) {
    std::vector<unsigned char> buf(kTraceMagic.begin(), kTraceMagic.end());
    io::put<std::uint32_t>(buf, h.version);
    io::put<std::uint32_t>(buf, h.num_samples);
    io::put<std::uint16_t>(buf, static_cast<std::uint16_t>(h.num_layers));
    io::put<std::uint16_t>(buf, static_cast<std::uint16_t>(h.tokens));
    io::put<std::uint32_t>(buf, h.hidden);
    buf.push_back(h.label_present ? 1 : 0);
    buf.push_back(h.dtype);
    io::put<std::uint16_t>(buf, 0);
    return buf;
}

inline TraceHeader decode_trace_header(std::span<const unsigned char> buf) {
    if (buf.size() < kTraceHeaderBytes) throw std::runtime_error("truncated header");
    if (!std::equal(kTraceMagic.begin(), kTraceMagic.end(), buf.begin())) throw std::runtime_error("bad magic");
    TraceHeader h;
    h.version = io::get<std::uint32_t>(buf, 8);
    if (h.version != kTraceVersion) throw std::runtime_error("unsupported version " + std::to_string(h.version));
    h.num_samples = io::get<std::uint32_t>(buf, 12);
    h.num_layers = io::get<std::uint16_t>(buf, 16);
    h.tokens = io::get<std::uint16_t>(buf, 18);
    h.hidden = io::get<std::uint32_t>(buf, 20);
    if (buf[24] > 1) throw std::runtime_error("bad label_present flag");
    h.label_present = buf[24] == 1;
    h.dtype = buf[25];
    try {
        h.validate();
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error(e.what());
    }
    return h;
}

/// Streams samples to disk. The label block precedes the samples, so it is
/// reserved up front and patched in finish().
class TraceWriter {
public:
    TraceWriter(const std::filesystem::path& path, TraceHeader header)
        : header_(header), out_(path, std::ios::binary | std::ios::trunc) {
        header_.validate();
        if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
        const auto head = encode_trace_header(header_);
        out_.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
        if (header_.label_present) {
            labels_.reserve(header_.num_samples);
            const std::vector<char> zeros(std::size_t{header_.num_samples} * 4, 0);
            out_.write(zeros.data(), static_cast<std::streamsize>(zeros.size()));
        }
    }

    void append(const ActivationTrace& trace) {
        if (written_ >= header_.num_samples) throw std::invalid_argument("more samples than header declares");
        check_trace_matches(header_, trace);
        for (const auto& m : trace.x) io::write_f32s(out_, m.values());
        for (const auto& m : trace.y) io::write_f32s(out_, m.values());
        if (header_.label_present) labels_.push_back(*trace.label);
        ++written_;
    }

    void finish() {
        if (written_ != header_.num_samples)
            throw std::invalid_argument("wrote " + std::to_string(written_) + " samples, header declares " +
                                        std::to_string(header_.num_samples));
        if (header_.label_present) {
            std::vector<unsigned char> buf;
            for (auto l : labels_) io::put<std::uint32_t>(buf, l);
            out_.seekp(static_cast<std::streamoff>(header_.labels_offset()));
            out_.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        }
        out_.flush();
        if (!out_) throw std::runtime_error("I/O failure while writing trace file");
        out_.close();
    }

    const TraceHeader& header() const { return header_; }

private:
    TraceHeader header_;
    std::ofstream out_;
    std::vector<std::uint32_t> labels_;
    std::uint32_t written_ = 0;
};

inline void write_trace_file(const std::filesystem::path& path, const TraceHeader& header,
                             std::span<const ActivationTrace> traces) {
    if (traces.size() != header.num_samples)
        throw std::invalid_argument("trace count does not match header num_samples");
    TraceWriter w(path, header);
    for (const auto& t : traces) w.append(t);
    w.finish();
}

/// Random-access reader. Header and file length are validated on open;
/// sample values are checked for finiteness as they are read.
class TraceReader {
public:
    explicit TraceReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
        if (!in_) throw std::runtime_error("cannot open " + path.string());
        std::vector<unsigned char> head(kTraceHeaderBytes);
        in_.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
        if (in_.gcount() != static_cast<std::streamsize>(head.size())) throw std::runtime_error("truncated header");
        header_ = decode_trace_header(head);

        const auto actual = std::filesystem::file_size(path);
        if (actual < header_.file_bytes()) throw std::runtime_error("truncated payload");
        if (actual > header_.file_bytes()) throw std::runtime_error("trailing bytes after declared payload");

        if (header_.label_present) {
            std::vector<unsigned char> buf(std::size_t{header_.num_samples} * 4);
            in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
            if (!in_) throw std::runtime_error("truncated payload");
            labels_.resize(header_.num_samples);
            for (std::size_t i = 0; i < labels_.size(); ++i) labels_[i] = io::get<std::uint32_t>(buf, i * 4);
        }
    }

    const TraceHeader& header() const { return header_; }
    std::size_t size() const { return header_.num_samples; }
    bool has_labels() const { return header_.label_present; }
    std::optional<std::uint32_t> label(std::size_t i) const {
        if (!header_.label_present) return std::nullopt;
        return labels_.at(i);
    }

    ActivationTrace read(std::size_t index) const {
        if (index >= size()) throw std::out_of_range("sample index " + std::to_string(index) + " out of range");
        ActivationTrace t;
        t.x.assign(header_.num_layers, Matrix(header_.tokens, header_.hidden));
        t.y.assign(header_.num_layers, Matrix(header_.tokens, header_.hidden));
        {
            std::lock_guard lock(mutex_);
            in_.clear();
            in_.seekg(static_cast<std::streamoff>(header_.samples_offset() + index * header_.sample_bytes()));
            for (auto& m : t.x) io::read_f32s(in_, m.values());
            for (auto& m : t.y) io::read_f32s(in_, m.values());
        }
        for (std::size_t l = 0; l < header_.num_layers; ++l) {
            if (!all_finite(t.x[l]) || !all_finite(t.y[l]))
                throw std::runtime_error("non-finite value in sample " + std::to_string(index) + " layer " +
                                         std::to_string(l));
        }
        t.label = label(index);
        return t;
    }

    class iterator {
    public:
        using iterator_category = std::input_iterator_tag;
        using value_type = ActivationTrace;
        using difference_type = std::ptrdiff_t;

        iterator(const TraceReader* r, std::size_t i) : reader_(r), index_(i) {}
        ActivationTrace operator*() const { return reader_->read(index_); }
        iterator& operator++() {
            ++index_;
            return *this;
        }
        bool operator==(const iterator& o) const { return index_ == o.index_; }

    private:
        const TraceReader* reader_;
        std::size_t index_;
    };

    iterator begin() const { return {this, 0}; }
    iterator end() const { return {this, size()}; }

private:
    TraceHeader header_;
    std::vector<std::uint32_t> labels_;
    mutable std::ifstream in_;
    mutable std::mutex mutex_;
};

/// Traces held in memory, exposing the same size()/read() surface as TraceReader.
class InMemoryTraces {
public:
    InMemoryTraces() = default;
    explicit InMemoryTraces(std::vector<ActivationTrace> traces) : traces_(std::move(traces)) {}

    std::size_t size() const { return traces_.size(); }
    const ActivationTrace& read(std::size_t i) const { return traces_.at(i); }
    std::optional<std::uint32_t> label(std::size_t i) const { return traces_.at(i).label; }
    void push_back(ActivationTrace t) { traces_.push_back(std::move(t)); }
    std::span<const ActivationTrace> all() const { return traces_; }

private:
    std::vector<ActivationTrace> traces_;
};

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

/// Seeded shuffle of 0..n-1; the first round(n * fraction) go to train.
inline Split split(std::size_t n, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split fraction must be in (0, 1)");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(mix_seed(seed, 0x5b117));
    rng.shuffle(std::span<std::size_t>(idx));
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
    Split s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    return s;
}

}  // namespace vitclt
