// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "xpg/model.hpp"

namespace xpg {

struct ExponentHistogram {
    std::array<uint64_t, 256> counts{};
    uint64_t total = 0;

    // Throws Error(OddLength).
    void add(std::span<const std::byte> bf16_bytes);
    void merge(const ExponentHistogram& other);
    double entropy_bits() const;
};

ExponentHistogram build_histogram(std::span<const std::byte> bf16_bytes);

// Canonical prefix code over exponent bytes. Lengths alone define the code.
class HuffmanTable {
public:
    static constexpr unsigned kMaxCodeLength = 32;
    static constexpr unsigned kLookupBits = 12;

    HuffmanTable() = default;
    // Throws Error(Validation) on lengths > kMaxCodeLength, no symbols, or a
    // Kraft sum above one.
    static HuffmanTable from_lengths(const std::array<uint8_t, 256>& lengths);

    const std::array<uint8_t, 256>& code_lengths() const { return lengths_; }
    uint8_t length(uint8_t symbol) const { return lengths_[symbol]; }
    uint32_t code(uint8_t symbol) const { return codes_[symbol]; }
    unsigned max_length() const { return max_length_; }
    // Kraft sum scaled by 2^32.
    uint64_t kraft_numerator() const;
    uint64_t encoded_bits(const ExponentHistogram& hist) const;

    struct Lookup {
        uint8_t symbol = 0;
        uint8_t length = 0;  // 0: longer than kLookupBits or invalid prefix
    };
    const std::vector<Lookup>& lookup() const { return lookup_; }

    // Canonical decode for codes longer than the lookup width.
    // Returns the symbol count index or -1 for an invalid code.
    struct LengthGroup {
        uint32_t first_code = 0;
        uint32_t count = 0;
        uint32_t first_index = 0;
    };
    const std::array<LengthGroup, kMaxCodeLength + 1>& groups() const { return groups_; }
    const std::vector<uint8_t>& sorted_symbols() const { return sorted_; }

    bool operator==(const HuffmanTable& other) const { return lengths_ == other.lengths_; }

private:
    std::array<uint8_t, 256> lengths_{};
    std::array<uint32_t, 256> codes_{};
    unsigned max_length_ = 0;
    std::vector<Lookup> lookup_;
    std::array<LengthGroup, kMaxCodeLength + 1> groups_{};
    std::vector<uint8_t> sorted_;
};

// Optimal code for `hist`, length-limited to kMaxCodeLength. A single-symbol
// histogram gets a 1-bit code. Throws Error(EmptyHistogram).
HuffmanTable build_table(const ExponentHistogram& hist);

struct CompressedTensor {
    // value_count u64 + exponent stream length u64.
    static constexpr uint64_t kRecordHeaderBytes = 16;

    ExpertTensorId id;
    uint64_t value_count = 0;
    std::vector<uint8_t> sign_mantissa;
    std::vector<uint8_t> exponent_stream;
    uint64_t exponent_bit_count = 0;
    uint32_t table_id = 0;

    uint64_t byte_size() const { return kRecordHeaderBytes + value_count + exponent_stream.size(); }
};

// Throws Error(OddLength) or Error(SymbolNotInTable).
CompressedTensor compress(std::span<const std::byte> bf16_bytes, const HuffmanTable& table, ExpertTensorId id = {});

// Writes exactly 2 * value_count bytes into `out`. Throws TruncatedStream or
// InvalidCode. Returns the number of exponent bits consumed.
uint64_t decompress_into(const CompressedTensor& ct, const HuffmanTable& table, std::span<std::byte> out);
std::vector<std::byte> decompress(const CompressedTensor& ct, const HuffmanTable& table);

// 8 + exponent_bits / value_count.
double effective_bits_per_value(const CompressedTensor& ct);

// One model-wide table plus every expert tensor in (layer, expert, kind) order.
class CompressedModel {
public:
    static constexpr char kMagic[4] = {'X', 'P', 'G', 'C'};
    static constexpr uint32_t kVersion = 1;

    CompressedModel() = default;
    CompressedModel(ModelSpec spec, HuffmanTable table, std::vector<CompressedTensor> tensors);

    static CompressedModel from_weights(const WeightContainer& weights);

    const ModelSpec& spec() const { return spec_; }
    const HuffmanTable& table() const { return table_; }
    const std::vector<CompressedTensor>& tensors() const { return tensors_; }
    const CompressedTensor& tensor(const ExpertTensorId& id) const;

    uint64_t raw_bytes() const { return spec_.total_bytes(); }
    // Sum of per-tensor record sizes, excluding the file header.
    uint64_t compressed_bytes() const;
    double ratio() const;

    WeightContainer decompress_all() const;

    std::vector<std::byte> serialize() const;
    static CompressedModel deserialize(std::span<const std::byte> bytes);
    void save(const std::filesystem::path& path) const;
    static CompressedModel load(const std::filesystem::path& path);

private:
    ModelSpec spec_;
    HuffmanTable table_;
    std::vector<CompressedTensor> tensors_;
};

}  // namespace xpg
