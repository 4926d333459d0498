// SPDX-License-Identifier: Apache-2.0

#include "xpg/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <queue>

#include "xpg/bf16.hpp"
#include "xpg/error.hpp"

namespace xpg {

void ExponentHistogram::add(std::span<const std::byte> bf16_bytes) {
    if (bf16_bytes.size() % 2 != 0) throw Error(ErrorCode::OddLength, "bf16 byte length is odd");
    const size_t values = bf16_bytes.size() / 2;
    for (size_t i = 0; i < values; ++i) ++counts[bf16::exponent(bf16::load(bf16_bytes, i))];
    total += values;
}

void ExponentHistogram::merge(const ExponentHistogram& other) {
    for (size_t e = 0; e < 256; ++e) counts[e] += other.counts[e];
    total += other.total;
}

double ExponentHistogram::entropy_bits() const {
    if (total == 0) return 0.0;
    double h = 0.0;
    for (uint64_t c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log2(p);
    }
    return h;
}

ExponentHistogram build_histogram(std::span<const std::byte> bf16_bytes) {
    ExponentHistogram hist;
    hist.add(bf16_bytes);
    return hist;
}

HuffmanTable HuffmanTable::from_lengths(const std::array<uint8_t, 256>& lengths) {
    HuffmanTable table;
    table.lengths_ = lengths;
    for (unsigned s = 0; s < 256; ++s) {
        if (lengths[s] > kMaxCodeLength) throw Error(ErrorCode::Validation, "code length exceeds 32 bits");
        if (lengths[s] > 0) table.sorted_.push_back(static_cast<uint8_t>(s));
    }
    if (table.sorted_.empty()) throw Error(ErrorCode::Validation, "code has no symbols");
    std::stable_sort(table.sorted_.begin(), table.sorted_.end(),
                     [&](uint8_t a, uint8_t b) { return lengths[a] < lengths[b]; });
    if (table.kraft_numerator() > (uint64_t{1} << kMaxCodeLength)) {
        throw Error(ErrorCode::Validation, "code lengths violate the Kraft inequality");
    }

    uint64_t code = 0;
    unsigned previous = lengths[table.sorted_.front()];
    for (uint32_t index = 0; index < table.sorted_.size(); ++index) {
        const uint8_t symbol = table.sorted_[index];
        const unsigned len = lengths[symbol];
        code <<= (len - previous);
        previous = len;
        auto& group = table.groups_[len];
        if (group.count == 0) {
            group.first_code = static_cast<uint32_t>(code);
            group.first_index = index;
        }
        ++group.count;
        table.codes_[symbol] = static_cast<uint32_t>(code);
        ++code;
    }
    table.max_length_ = previous;

    table.lookup_.assign(size_t{1} << kLookupBits, Lookup{});
    for (uint8_t symbol : table.sorted_) {
        const unsigned len = lengths[symbol];
        if (len > kLookupBits) break;
        const uint64_t first = uint64_t{table.codes_[symbol]} << (kLookupBits - len);
        const uint64_t span = uint64_t{1} << (kLookupBits - len);
        for (uint64_t k = 0; k < span; ++k) table.lookup_[first + k] = Lookup{symbol, static_cast<uint8_t>(len)};
    }
    return table;
}

uint64_t HuffmanTable::kraft_numerator() const {
    uint64_t sum = 0;
    for (uint8_t len : lengths_) {
        if (len > 0) sum += uint64_t{1} << (kMaxCodeLength - len);
    }
    return sum;
}

uint64_t HuffmanTable::encoded_bits(const ExponentHistogram& hist) const {
    uint64_t bits = 0;
    for (size_t e = 0; e < 256; ++e) bits += hist.counts[e] * lengths_[e];
    return bits;
}

namespace {

std::array<uint8_t, 256> huffman_lengths(const std::array<uint64_t, 256>& counts) {
    struct Node {
        uint64_t weight;
        uint32_t order;
    };
    auto greater = [](const Node& a, const Node& b) {
        return a.weight != b.weight ? a.weight > b.weight : a.order > b.order;
    };
    std::priority_queue<Node, std::vector<Node>, decltype(greater)> heap(greater);
    std::vector<int32_t> parent(256, -1);
    for (uint32_t s = 0; s < 256; ++s) {
        if (counts[s] > 0) heap.push(Node{counts[s], s});
    }
    std::array<uint8_t, 256> lengths{};
    if (heap.size() == 1) {
        lengths[heap.top().order] = 1;
        return lengths;
    }
    while (heap.size() > 1) {
        const Node a = heap.top();
        heap.pop();
        const Node b = heap.top();
        heap.pop();
        const auto id = static_cast<uint32_t>(parent.size());
        parent.push_back(-1);
        parent[a.order] = static_cast<int32_t>(id);
        parent[b.order] = static_cast<int32_t>(id);
        heap.push(Node{a.weight + b.weight, id});
    }
    std::vector<uint32_t> depth(parent.size(), 0);
    for (size_t n = parent.size(); n-- > 0;) {
        if (parent[n] >= 0) depth[n] = depth[static_cast<size_t>(parent[n])] + 1;
    }
    std::array<uint32_t, 256> raw{};
    uint32_t deepest = 0;
    for (uint32_t s = 0; s < 256; ++s) {
        if (counts[s] > 0) {
            raw[s] = depth[s];
            deepest = std::max(deepest, depth[s]);
        }
    }

    constexpr unsigned cap = HuffmanTable::kMaxCodeLength;
    if (deepest > cap) {
        // Clamp, then lengthen the deepest sub-cap codes (rarest first) until
        // the Kraft sum fits again.
        for (auto& len : raw) len = std::min<uint32_t>(len, cap);
        auto kraft = [&] {
            uint64_t sum = 0;
            for (uint32_t s = 0; s < 256; ++s) {
                if (counts[s] > 0) sum += uint64_t{1} << (cap - raw[s]);
            }
            return sum;
        };
        uint64_t sum = kraft();
        while (sum > (uint64_t{1} << cap)) {
            int pick = -1;
            for (uint32_t s = 0; s < 256; ++s) {
                if (counts[s] == 0 || raw[s] >= cap) continue;
                if (pick < 0 || raw[s] > raw[pick] || (raw[s] == raw[pick] && counts[s] < counts[pick])) {
                    pick = static_cast<int>(s);
                }
            }
            sum -= uint64_t{1} << (cap - raw[pick] - 1);
            ++raw[pick];
        }
    }
    for (uint32_t s = 0; s < 256; ++s) lengths[s] = static_cast<uint8_t>(raw[s]);
    return lengths;
}

class BitWriter {
public:
    explicit BitWriter(std::vector<uint8_t>& out) : out_(out) {}
    void put(uint32_t code, unsigned len) {
        acc_ = (acc_ << len) | code;
        pending_ += len;
        while (pending_ >= 8) {
            pending_ -= 8;
            out_.push_back(static_cast<uint8_t>(acc_ >> pending_));
        }
    }
    void flush() {
        if (pending_ > 0) out_.push_back(static_cast<uint8_t>(acc_ << (8 - pending_)));
        pending_ = 0;
    }

private:
    std::vector<uint8_t>& out_;
    uint64_t acc_ = 0;
    unsigned pending_ = 0;
};

class BitReader {
public:
    explicit BitReader(std::span<const uint8_t> in) : in_(in) {}

    void refill() {
        while (valid_ <= 56 && next_ < in_.size()) {
            buf_ |= uint64_t{in_[next_++]} << (56 - valid_);
            valid_ += 8;
        }
    }
    uint64_t window() const { return buf_; }
    unsigned valid() const { return valid_; }
    void consume(unsigned n) {
        buf_ <<= n;
        valid_ -= n;
    }

private:
    std::span<const uint8_t> in_;
    size_t next_ = 0;
    uint64_t buf_ = 0;
    unsigned valid_ = 0;
};

inline uint8_t decode_symbol(BitReader& reader, const HuffmanTable& table, unsigned& consumed) {
    reader.refill();
    const uint64_t window = reader.window();
    const auto& entry = table.lookup()[window >> (64 - HuffmanTable::kLookupBits)];
    if (entry.length != 0) {
        if (entry.length > reader.valid()) throw Error(ErrorCode::TruncatedStream, "exponent stream ends mid-code");
        reader.consume(entry.length);
        consumed = entry.length;
        return entry.symbol;
    }
    for (unsigned len = 1; len <= table.max_length(); ++len) {
        if (len > reader.valid()) throw Error(ErrorCode::TruncatedStream, "exponent stream ends mid-code");
        const auto& group = table.groups()[len];
        if (group.count == 0) continue;
        const auto code = static_cast<uint32_t>(window >> (64 - len));
        if (code >= group.first_code && code - group.first_code < group.count) {
            reader.consume(len);
            consumed = len;
            return table.sorted_symbols()[group.first_index + (code - group.first_code)];
        }
    }
    throw Error(ErrorCode::InvalidCode, "bit pattern matches no codeword");
}

// Decodes every exponent of `ct`, handing each to `sink(index, exponent)`.
template <typename Sink>
uint64_t decode_exponents(const CompressedTensor& ct, const HuffmanTable& table, Sink&& sink) {
    BitReader reader(ct.exponent_stream);
    uint64_t bits = 0;
    for (uint64_t i = 0; i < ct.value_count; ++i) {
        unsigned len = 0;
        const uint8_t exp = decode_symbol(reader, table, len);
        bits += len;
        sink(i, exp);
    }
    return bits;
}

}  // namespace

HuffmanTable build_table(const ExponentHistogram& hist) {
    if (hist.total == 0) throw Error(ErrorCode::EmptyHistogram, "histogram has no samples");
    return HuffmanTable::from_lengths(huffman_lengths(hist.counts));
}

CompressedTensor compress(std::span<const std::byte> bf16_bytes, const HuffmanTable& table, ExpertTensorId id) {
    if (bf16_bytes.size() % 2 != 0) throw Error(ErrorCode::OddLength, "bf16 byte length is odd");
    CompressedTensor ct;
    ct.id = id;
    ct.value_count = bf16_bytes.size() / 2;
    ct.sign_mantissa.resize(ct.value_count);
    ct.exponent_stream.reserve(ct.value_count / 2 + 8);
    BitWriter writer(ct.exponent_stream);
    for (uint64_t i = 0; i < ct.value_count; ++i) {
        const uint16_t bits = bf16::load(bf16_bytes, i);
        const uint8_t exp = bf16::exponent(bits);
        const unsigned len = table.length(exp);
        if (len == 0) {
            throw Error(ErrorCode::SymbolNotInTable, "exponent " + std::to_string(exp) + " has no codeword");
        }
        writer.put(table.code(exp), len);
        ct.exponent_bit_count += len;
        ct.sign_mantissa[i] = bf16::sign_mantissa(bits);
    }
    writer.flush();
    return ct;
}

uint64_t decompress_into(const CompressedTensor& ct, const HuffmanTable& table, std::span<std::byte> out) {
    if (out.size() != 2 * ct.value_count) throw Error(ErrorCode::Validation, "destination size mismatch");
    if (ct.sign_mantissa.size() != ct.value_count) {
        throw Error(ErrorCode::TruncatedStream, "sign/mantissa plane shorter than value count");
    }
    return decode_exponents(ct, table, [&](uint64_t i, uint8_t exp) {
        bf16::store(out, i, bf16::assemble(exp, ct.sign_mantissa[i]));
    });
}

std::vector<std::byte> decompress(const CompressedTensor& ct, const HuffmanTable& table) {
    std::vector<std::byte> out(2 * ct.value_count);
    decompress_into(ct, table, out);
    return out;
}

double effective_bits_per_value(const CompressedTensor& ct) {
    return 8.0 + static_cast<double>(ct.exponent_bit_count) / static_cast<double>(ct.value_count);
}

CompressedModel::CompressedModel(ModelSpec spec, HuffmanTable table, std::vector<CompressedTensor> tensors)
    : spec_(spec), table_(std::move(table)), tensors_(std::move(tensors)) {
    spec_.validate();
    if (tensors_.size() != spec_.tensor_count()) throw Error(ErrorCode::Validation, "tensor count mismatch");
}

CompressedModel CompressedModel::from_weights(const WeightContainer& weights) {
    const ModelSpec& spec = weights.spec();
    HuffmanTable table = build_table(build_histogram(weights.payload()));
    std::vector<CompressedTensor> tensors;
    tensors.reserve(spec.tensor_count());
    for (uint64_t index = 0; index < spec.tensor_count(); ++index) {
        const ExpertTensorId id = id_from_linear(index, spec);
        tensors.push_back(compress(weights.tensor(id), table, id));
    }
    return CompressedModel(spec, std::move(table), std::move(tensors));
}

const CompressedTensor& CompressedModel::tensor(const ExpertTensorId& id) const {
    return tensors_[linear_index(id, spec_)];
}

uint64_t CompressedModel::compressed_bytes() const {
    uint64_t sum = 0;
    for (const auto& ct : tensors_) sum += ct.byte_size();
    return sum;
}

double CompressedModel::ratio() const {
    return static_cast<double>(compressed_bytes()) / static_cast<double>(raw_bytes());
}

WeightContainer CompressedModel::decompress_all() const {
    std::vector<std::byte> payload(spec_.total_bytes());
    for (const auto& ct : tensors_) {
        std::span<std::byte> dest(payload.data() + tensor_offset(ct.id, spec_), spec_.tensor_bytes(ct.id.kind));
        decompress_into(ct, table_, dest);
    }
    return WeightContainer(spec_, std::move(payload));
}

std::vector<std::byte> CompressedModel::serialize() const {
    std::vector<std::byte> out;
    out.reserve(4 + 4 + 32 + 256 + compressed_bytes());
    for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
    put_u32(out, kVersion);
    put_u64(out, spec_.num_layers);
    put_u64(out, spec_.experts_per_layer);
    put_u64(out, spec_.hidden_dim);
    put_u64(out, spec_.intermediate_dim);
    for (uint8_t len : table_.code_lengths()) out.push_back(static_cast<std::byte>(len));
    for (const auto& ct : tensors_) {
        put_u64(out, ct.value_count);
        put_u64(out, ct.exponent_stream.size());
        for (uint8_t b : ct.sign_mantissa) out.push_back(static_cast<std::byte>(b));
        for (uint8_t b : ct.exponent_stream) out.push_back(static_cast<std::byte>(b));
    }
    return out;
}

CompressedModel CompressedModel::deserialize(std::span<const std::byte> bytes) {
    constexpr size_t header = 4 + 4 + 32 + 256;
    if (bytes.size() < header) {
        throw Error(ErrorCode::CorruptFile, "XPGC header truncated at byte " + std::to_string(bytes.size()));
    }
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error(ErrorCode::CorruptFile, "bad XPGC magic at byte 0");
    if (get_u32(bytes, 4) != kVersion) throw Error(ErrorCode::CorruptFile, "unsupported XPGC version at byte 4");
    ModelSpec spec{get_u64(bytes, 8), get_u64(bytes, 16), get_u64(bytes, 24), get_u64(bytes, 32)};
    spec.validate();
    std::array<uint8_t, 256> lengths{};
    for (size_t s = 0; s < 256; ++s) lengths[s] = std::to_integer<uint8_t>(bytes[40 + s]);
    HuffmanTable table;
    try {
        table = HuffmanTable::from_lengths(lengths);
    } catch (const Error& e) {
        throw Error(ErrorCode::CorruptFile, std::string("code length table at byte 40: ") + e.what());
    }

    std::vector<CompressedTensor> tensors;
    tensors.reserve(spec.tensor_count());
    size_t pos = header;
    for (uint64_t index = 0; index < spec.tensor_count(); ++index) {
        const ExpertTensorId id = id_from_linear(index, spec);
        if (bytes.size() - pos < 16) {
            throw Error(ErrorCode::TruncatedStream,
                        "record of tensor " + to_string(id) + " truncated at byte " + std::to_string(pos));
        }
        CompressedTensor ct;
        ct.id = id;
        ct.value_count = get_u64(bytes, pos);
        const uint64_t stream_len = get_u64(bytes, pos + 8);
        if (ct.value_count != spec.tensor_bytes(id.kind) / 2) {
            throw Error(ErrorCode::CorruptFile, "value count mismatch for " + to_string(id) + " at byte " +
                                                    std::to_string(pos));
        }
        pos += 16;
        if (bytes.size() - pos < ct.value_count || bytes.size() - pos - ct.value_count < stream_len) {
            throw Error(ErrorCode::TruncatedStream,
                        "record of tensor " + to_string(id) + " truncated at byte " + std::to_string(pos));
        }
        ct.sign_mantissa.resize(ct.value_count);
        std::memcpy(ct.sign_mantissa.data(), bytes.data() + pos, ct.value_count);
        pos += ct.value_count;
        ct.exponent_stream.resize(stream_len);
        std::memcpy(ct.exponent_stream.data(), bytes.data() + pos, stream_len);
        pos += stream_len;
        try {
            ct.exponent_bit_count = decode_exponents(ct, table, [](uint64_t, uint8_t) {});
        } catch (const Error& e) {
            throw Error(e.code(), "tensor " + to_string(id) + " at byte " + std::to_string(pos - stream_len) + ": " +
                                      e.what());
        }
        tensors.push_back(std::move(ct));
    }
    if (pos != bytes.size()) {
        throw Error(ErrorCode::CorruptFile, "trailing bytes after last record at byte " + std::to_string(pos));
    }
    return CompressedModel(spec, std::move(table), std::move(tensors));
}

void CompressedModel::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

CompressedModel CompressedModel::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

}  // namespace xpg
