// SPDX-License-Identifier: Apache-2.0

#include "xpg/paged_tensor.hpp"

#include <string>

#include "xpg/error.hpp"

namespace xpg {

std::string_view to_string(PageState state) {
    switch (state) {
        case PageState::Unmapped: return "Unmapped";
        case PageState::Loading: return "Loading";
        case PageState::Resident: return "Resident";
        case PageState::Evicting: return "Evicting";
    }
    return "?";
}

AddressSpace::AddressSpace(const ModelSpec& spec, uint64_t base) : spec_(spec) {
    spec_.validate();
    for (TensorKind kind : kAllKinds) {
        extent_[kind_index(kind)] = spec.num_layers * spec.experts_per_layer * spec.tensor_bytes(kind);
    }
    // Second region starts on the next 4 KiB boundary after the first.
    base_[0] = base;
    base_[1] = (base + extent_[0] + 0xfffull) & ~0xfffull;
}

uint64_t AddressSpace::page_vaddr(const ExpertTensorId& id) const {
    check_bounds(id, spec_);
    const uint64_t sigma = spec_.tensor_bytes(id.kind);
    return base(id.kind) + uint64_t{id.layer - 1} * spec_.experts_per_layer * sigma + uint64_t{id.expert - 1} * sigma;
}

std::optional<AddressSpace::Translation> AddressSpace::translate(uint64_t vaddr) const {
    for (TensorKind kind : kAllKinds) {
        const uint64_t lo = base(kind);
        if (vaddr < lo || vaddr >= lo + extent(kind)) continue;
        const uint64_t sigma = spec_.tensor_bytes(kind);
        const uint64_t page = (vaddr - lo) / sigma;
        ExpertTensorId id{static_cast<uint32_t>(page / spec_.experts_per_layer + 1),
                          static_cast<uint32_t>(page % spec_.experts_per_layer + 1), kind};
        return Translation{id, (vaddr - lo) % sigma};
    }
    return std::nullopt;
}

uint32_t target_layer(uint32_t layer, uint32_t num_layers) {
    return (layer + 2 * num_layers - 3) % num_layers + 1;
}

PageTable::PageTable(const ModelSpec& spec, TraceSink sink) : space_(spec), sink_(std::move(sink)) {
    const uint64_t pool = 2 * spec.experts_per_layer;
    arena_size_ = pool * spec.expert_bytes();
    arena_ = std::make_unique<std::byte[]>(arena_size_);
    pages_.resize(spec.tensor_count());
    for (TensorKind kind : kAllKinds) {
        reverse_[kind_index(kind)].resize(pool);
        for (uint32_t m = 1; m <= pool; ++m) free_[kind_index(kind)].insert(m);
    }
}

PageTable::PageEntry& PageTable::entry(const ExpertTensorId& id) { return pages_[linear_index(id, spec())]; }

const PageTable::PageEntry& PageTable::entry(const ExpertTensorId& id) const {
    return pages_[linear_index(id, spec())];
}

uint64_t PageTable::block_offset(TensorKind kind, uint32_t block_id) const {
    const uint64_t pool = 2 * spec().experts_per_layer;
    const uint64_t kind_base = kind == TensorKind::GateUp ? 0 : pool * spec().gate_up_bytes();
    return kind_base + uint64_t{block_id - 1} * spec().tensor_bytes(kind);
}

void PageTable::emit(std::string_view event, const ExpertTensorId& id, uint32_t block) {
    ++step_;
    if (!sink_) return;
    std::string line;
    line.reserve(64);
    line += "event=";
    line += event;
    line += " layer=" + std::to_string(id.layer);
    line += " expert=" + std::to_string(id.expert);
    line += " kind=" + std::to_string(static_cast<int>(id.kind));
    line += " block=" + std::to_string(block);
    line += " t=" + std::to_string(step_);
    sink_(line);
}

BlockHandle PageTable::map_page(const ExpertTensorId& id) {
    std::lock_guard lock(mutex_);
    PageEntry& page = entry(id);
    if (page.block != 0) throw Error(ErrorCode::DoubleMap, "page " + to_string(id) + " already bound");
    auto& free_list = free_[kind_index(id.kind)];
    if (free_list.empty()) throw Error(ErrorCode::PoolExhausted, "no free block for " + to_string(id));
    const uint32_t block = *free_list.begin();
    free_list.erase(free_list.begin());
    page.block = block;
    page.state = PageState::Loading;
    reverse_[kind_index(id.kind)][block - 1] = id;
    bound_bytes_ += spec().tensor_bytes(id.kind);
    if (bound_bytes_ > peak_bytes_) peak_bytes_ = bound_bytes_;
    ++pages_mapped_;
    emit("map", id, block);
    return BlockHandle{id.kind, block, block_offset(id.kind, block), spec().tensor_bytes(id.kind)};
}

void PageTable::mark_resident(const ExpertTensorId& id) {
    std::lock_guard lock(mutex_);
    PageEntry& page = entry(id);
    if (page.state != PageState::Loading) {
        throw Error(ErrorCode::IllegalTransition,
                    "mark_resident on " + to_string(id) + " in state " + std::string(to_string(page.state)));
    }
    page.state = PageState::Resident;
    emit("state", id, page.block);
}

void PageTable::begin_evict(const ExpertTensorId& id) {
    std::lock_guard lock(mutex_);
    PageEntry& page = entry(id);
    if (page.state != PageState::Resident) {
        throw Error(ErrorCode::IllegalTransition,
                    "begin_evict on " + to_string(id) + " in state " + std::string(to_string(page.state)));
    }
    page.state = PageState::Evicting;
    emit("state", id, page.block);
}

void PageTable::unmap_page(const ExpertTensorId& id) {
    std::lock_guard lock(mutex_);
    PageEntry& page = entry(id);
    if (page.block == 0) throw Error(ErrorCode::NotMapped, "page " + to_string(id) + " is not mapped");
    if (page.state == PageState::Loading) {
        throw Error(ErrorCode::IllegalTransition, "unmap of " + to_string(id) + " while Loading");
    }
    if (page.state == PageState::Resident) {
        page.state = PageState::Evicting;
        emit("state", id, page.block);
    }
    const uint32_t block = page.block;
    reverse_[kind_index(id.kind)][block - 1].reset();
    free_[kind_index(id.kind)].insert(block);
    bound_bytes_ -= spec().tensor_bytes(id.kind);
    page.block = 0;
    page.state = PageState::Unmapped;
    emit("unmap", id, block);
}

PageState PageTable::state(const ExpertTensorId& id) const {
    std::lock_guard lock(mutex_);
    return entry(id).state;
}

std::optional<BlockHandle> PageTable::block_of(const ExpertTensorId& id) const {
    std::lock_guard lock(mutex_);
    const PageEntry& page = entry(id);
    if (page.block == 0) return std::nullopt;
    return BlockHandle{id.kind, page.block, block_offset(id.kind, page.block), spec().tensor_bytes(id.kind)};
}

std::optional<ExpertTensorId> PageTable::page_of(TensorKind kind, uint32_t block_id) const {
    std::lock_guard lock(mutex_);
    const auto& reverse = reverse_[kind_index(kind)];
    if (block_id < 1 || block_id > reverse.size()) throw Error(ErrorCode::OutOfRange, "block id out of range");
    return reverse[block_id - 1];
}

size_t PageTable::free_blocks(TensorKind kind) const {
    std::lock_guard lock(mutex_);
    return free_[kind_index(kind)].size();
}

std::span<std::byte> PageTable::load_target(const ExpertTensorId& id) {
    std::lock_guard lock(mutex_);
    const PageEntry& page = entry(id);
    if (page.state != PageState::Loading) {
        throw Error(ErrorCode::IllegalTransition,
                    "load into " + to_string(id) + " in state " + std::string(to_string(page.state)));
    }
    return {arena_.get() + block_offset(id.kind, page.block), spec().tensor_bytes(id.kind)};
}

std::span<const std::byte> PageTable::resolve(uint64_t vaddr, uint64_t length) const {
    const auto translation = space_.translate(vaddr);
    if (!translation) throw Error(ErrorCode::PageFault, "address outside reserved regions");
    const ExpertTensorId& id = translation->id;
    const uint64_t sigma = spec().tensor_bytes(id.kind);
    if (translation->offset_in_page + length > sigma) {
        throw Error(ErrorCode::PageFault, "access crosses page boundary of " + to_string(id));
    }
    std::lock_guard lock(mutex_);
    const PageEntry& page = entry(id);
    if (page.state != PageState::Resident) {
        throw Error(ErrorCode::PageFault,
                    "read of " + to_string(id) + " in state " + std::string(to_string(page.state)));
    }
    return {arena_.get() + block_offset(id.kind, page.block) + translation->offset_in_page, length};
}

std::span<const std::byte> PageTable::read(const ExpertTensorId& id) const {
    return resolve(space_.page_vaddr(id), spec().tensor_bytes(id.kind));
}

uint64_t PageTable::bound_bytes() const {
    std::lock_guard lock(mutex_);
    return bound_bytes_;
}

uint64_t PageTable::arena_peak_bytes() const {
    std::lock_guard lock(mutex_);
    return peak_bytes_;
}

uint64_t PageTable::pages_ever_mapped() const {
    std::lock_guard lock(mutex_);
    return pages_mapped_;
}

uint64_t PageTable::logical_time() const {
    std::lock_guard lock(mutex_);
    return step_;
}

std::set<uint32_t> PageTable::bound_layers(TensorKind kind) const {
    std::lock_guard lock(mutex_);
    std::set<uint32_t> layers;
    for (const auto& page : reverse_[kind_index(kind)]) {
        if (page) layers.insert(page->layer);
    }
    return layers;
}

std::set<uint32_t> PageTable::resident_layers() const {
    std::lock_guard lock(mutex_);
    std::set<uint32_t> layers;
    for (TensorKind kind : kAllKinds) {
        for (const auto& page : reverse_[kind_index(kind)]) {
            if (page && entry(*page).state == PageState::Resident) layers.insert(page->layer);
        }
    }
    return layers;
}

bool PageTable::consistent() const {
    std::lock_guard lock(mutex_);
    uint64_t bound = 0;
    for (uint64_t index = 0; index < pages_.size(); ++index) {
        const PageEntry& page = pages_[index];
        const ExpertTensorId id = id_from_linear(index, spec());
        const auto& reverse = reverse_[kind_index(id.kind)];
        if (page.block == 0) {
            if (page.state != PageState::Unmapped) return false;
            continue;
        }
        if (page.state == PageState::Unmapped) return false;
        if (!reverse[page.block - 1] || *reverse[page.block - 1] != id) return false;
        if (free_[kind_index(id.kind)].contains(page.block)) return false;
        bound += spec().tensor_bytes(id.kind);
    }
    for (TensorKind kind : kAllKinds) {
        const auto& reverse = reverse_[kind_index(kind)];
        for (uint32_t m = 1; m <= reverse.size(); ++m) {
            const bool is_free = free_[kind_index(kind)].contains(m);
            if (reverse[m - 1].has_value() == is_free) return false;
            if (reverse[m - 1] && entry(*reverse[m - 1]).block != m) return false;
        }
    }
    return bound == bound_bytes_;
}

}  // namespace xpg
