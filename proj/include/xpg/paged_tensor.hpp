// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string_view>
#include <vector>

#include "xpg/model.hpp"

namespace xpg {

enum class PageState : uint8_t { Unmapped, Loading, Resident, Evicting };

std::string_view to_string(PageState state);

// Two disjoint reserved virtual regions, one per tensor kind. Addresses are
// abstract integers; nothing is ever dereferenced through them directly.
class AddressSpace {
public:
    static constexpr uint64_t kDefaultBase = 0x7f0000000000ull;

    explicit AddressSpace(const ModelSpec& spec, uint64_t base = kDefaultBase);

    uint64_t base(TensorKind kind) const { return base_[kind_index(kind)]; }
    uint64_t extent(TensorKind kind) const { return extent_[kind_index(kind)]; }
    const ModelSpec& spec() const { return spec_; }

    // v0 + (i-1)*L*sigma + (j-1)*sigma. Throws Error(OutOfRange).
    uint64_t page_vaddr(const ExpertTensorId& id) const;

    struct Translation {
        ExpertTensorId id;
        uint64_t offset_in_page;
    };
    // Inverse of page_vaddr for any address inside a reserved region.
    std::optional<Translation> translate(uint64_t vaddr) const;

private:
    ModelSpec spec_;
    uint64_t base_[2];
    uint64_t extent_[2];
};

inline uint64_t page_vaddr(const ExpertTensorId& id, const AddressSpace& space) { return space.page_vaddr(id); }

// Layer whose blocks are recycled when materializing layer i: the second
// preceding layer with cyclic wraparound, ((i - 3 + N) mod N) + 1.
uint32_t target_layer(uint32_t layer, uint32_t num_layers);

struct BlockHandle {
    TensorKind kind = TensorKind::GateUp;
    uint32_t block_id = 0;  // 1-based within its kind's pool
    uint64_t arena_offset = 0;
    uint64_t size = 0;
};

// Receives one line per page transition:
//   event=<map|unmap|state> layer=<i> expert=<j> kind=<d> block=<m> t=<step>
using TraceSink = std::function<void(std::string_view)>;

// Page table over a fixed pool of 2L blocks per kind (4L total) carved out of
// one owned arena. All methods are internally synchronized.
class PageTable {
public:
    explicit PageTable(const ModelSpec& spec, TraceSink sink = {});

    PageTable(const PageTable&) = delete;
    PageTable& operator=(const PageTable&) = delete;

    const ModelSpec& spec() const { return space_.spec(); }
    const AddressSpace& address_space() const { return space_; }

    // Unmapped -> Loading, binding the lowest free block of the page's kind.
    // Throws DoubleMap if the page already owns a block, PoolExhausted if the
    // kind's pool is empty.
    BlockHandle map_page(const ExpertTensorId& id);
    // Loading -> Resident (load-complete signal).
    void mark_resident(const ExpertTensorId& id);
    // Resident -> Evicting.
    void begin_evict(const ExpertTensorId& id);
    // Resident|Evicting -> Unmapped; a Resident page passes through Evicting.
    // The block returns to the free list and its contents become garbage.
    void unmap_page(const ExpertTensorId& id);

    PageState state(const ExpertTensorId& id) const;
    std::optional<BlockHandle> block_of(const ExpertTensorId& id) const;
    std::optional<ExpertTensorId> page_of(TensorKind kind, uint32_t block_id) const;
    size_t free_blocks(TensorKind kind) const;
    size_t pool_blocks(TensorKind) const { return 2 * spec().experts_per_layer; }

    // Writable view of a Loading page's block, for loaders.
    std::span<std::byte> load_target(const ExpertTensorId& id);
    // Read access through the stable virtual address. Throws PageFault unless
    // the whole range lies inside one Resident page.
    std::span<const std::byte> resolve(uint64_t vaddr, uint64_t length) const;
    std::span<const std::byte> read(const ExpertTensorId& id) const;

    uint64_t arena_bytes() const { return arena_size_; }
    uint64_t bound_bytes() const;
    uint64_t arena_peak_bytes() const;
    uint64_t pages_ever_mapped() const;
    uint64_t logical_time() const;

    // Layers with at least one page of `kind` currently bound to a block.
    std::set<uint32_t> bound_layers(TensorKind kind) const;
    // Layers with at least one page (any kind) in the Resident state.
    std::set<uint32_t> resident_layers() const;

    // Forward and reverse maps agree and free lists hold exactly the unbound
    // blocks. Used by tests.
    bool consistent() const;

private:
    struct PageEntry {
        PageState state = PageState::Unmapped;
        uint32_t block = 0;  // 0: unbound
    };

    PageEntry& entry(const ExpertTensorId& id);
    const PageEntry& entry(const ExpertTensorId& id) const;
    uint64_t block_offset(TensorKind kind, uint32_t block_id) const;
    void emit(std::string_view event, const ExpertTensorId& id, uint32_t block);

    AddressSpace space_;
    TraceSink sink_;
    uint64_t arena_size_ = 0;
    std::unique_ptr<std::byte[]> arena_;

    mutable std::mutex mutex_;
    std::vector<PageEntry> pages_;
    std::vector<std::optional<ExpertTensorId>> reverse_[2];  // index block_id - 1
    std::set<uint32_t> free_[2];
    uint64_t bound_bytes_ = 0;
    uint64_t peak_bytes_ = 0;
    uint64_t pages_mapped_ = 0;
    uint64_t step_ = 0;
};

}  // namespace xpg
