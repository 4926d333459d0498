// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <map>
#include <random>
#include <sstream>
#include <string>

#include "xpg/error.hpp"
#include "xpg/paged_tensor.hpp"

using namespace xpg;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no xpg::Error thrown";
    return ErrorCode::Aborted;
}

ExpertTensorId gu(uint32_t i, uint32_t j) { return {i, j, TensorKind::GateUp}; }
ExpertTensorId dn(uint32_t i, uint32_t j) { return {i, j, TensorKind::Down}; }

}  // namespace

TEST(AddressSpace, PageAddressExamples) {
    // H=5, F=5 gives sigma1 = 100 for the fused tensor.
    const ModelSpec spec{4, 8, 5, 5};
    ASSERT_EQ(spec.gate_up_bytes(), 100u);
    const AddressSpace space(spec);
    EXPECT_EQ(page_vaddr(gu(1, 1), space), space.base(TensorKind::GateUp));
    EXPECT_EQ(page_vaddr(gu(2, 3), space), space.base(TensorKind::GateUp) + 1000);
    EXPECT_EQ(page_vaddr(dn(4, 8), space),
              space.base(TensorKind::Down) + 4 * 8 * spec.down_bytes() - spec.down_bytes());
    EXPECT_EQ(code_of([&] { space.page_vaddr(gu(5, 1)); }), ErrorCode::OutOfRange);
}

TEST(AddressSpace, RegionsDisjointAndTranslateInverts) {
    const ModelSpec spec{3, 4, 6, 10};
    const AddressSpace space(spec);
    const uint64_t g0 = space.base(TensorKind::GateUp), g1 = g0 + space.extent(TensorKind::GateUp);
    const uint64_t d0 = space.base(TensorKind::Down), d1 = d0 + space.extent(TensorKind::Down);
    EXPECT_EQ(space.extent(TensorKind::GateUp), 3 * 4 * spec.gate_up_bytes());
    EXPECT_TRUE(g1 <= d0 || d1 <= g0);
    for (uint64_t index = 0; index < spec.tensor_count(); ++index) {
        const ExpertTensorId id = id_from_linear(index, spec);
        const uint64_t v = space.page_vaddr(id);
        for (uint64_t off : {uint64_t{0}, spec.tensor_bytes(id.kind) - 1}) {
            const auto t = space.translate(v + off);
            ASSERT_TRUE(t);
            EXPECT_EQ(t->id, id);
            EXPECT_EQ(t->offset_in_page, off);
        }
    }
    EXPECT_FALSE(space.translate(g0 - 1));
    EXPECT_FALSE(space.translate(d1));
}

TEST(TargetLayer, FormulaTable) {
    EXPECT_EQ(target_layer(2, 48), 48u);
    EXPECT_EQ(target_layer(3, 48), 1u);
    EXPECT_EQ(target_layer(5, 48), 3u);
    for (uint32_t n : {2u, 3u, 8u, 48u}) {
        for (uint32_t i = 1; i <= n; ++i) {
            // Two steps back on the cycle 1..N.
            uint32_t expect = i;
            for (int s = 0; s < 2; ++s) expect = expect == 1 ? n : expect - 1;
            EXPECT_EQ(target_layer(i, n), expect) << "i=" << i << " N=" << n;
        }
    }
}

TEST(PageTable, Lifecycle) {
    const ModelSpec spec{2, 2, 4, 8};
    PageTable table(spec);
    EXPECT_EQ(table.arena_peak_bytes(), 0u);
    EXPECT_EQ(table.state(gu(1, 1)), PageState::Unmapped);
    const BlockHandle h = table.map_page(gu(1, 1));
    EXPECT_EQ(h.block_id, 1u);
    EXPECT_EQ(h.size, spec.gate_up_bytes());
    EXPECT_EQ(table.state(gu(1, 1)), PageState::Loading);
    EXPECT_EQ(code_of([&] { table.map_page(gu(1, 1)); }), ErrorCode::DoubleMap);
    EXPECT_EQ(code_of([&] { table.read(gu(1, 1)); }), ErrorCode::PageFault);
    EXPECT_EQ(code_of([&] { table.unmap_page(gu(1, 1)); }), ErrorCode::IllegalTransition);
    EXPECT_EQ(code_of([&] { table.begin_evict(gu(1, 1)); }), ErrorCode::IllegalTransition);
    table.mark_resident(gu(1, 1));
    EXPECT_EQ(code_of([&] { table.mark_resident(gu(1, 1)); }), ErrorCode::IllegalTransition);
    EXPECT_EQ(table.read(gu(1, 1)).size(), spec.gate_up_bytes());
    table.begin_evict(gu(1, 1));
    EXPECT_EQ(table.state(gu(1, 1)), PageState::Evicting);
    EXPECT_EQ(code_of([&] { table.read(gu(1, 1)); }), ErrorCode::PageFault);
    table.unmap_page(gu(1, 1));
    EXPECT_EQ(table.state(gu(1, 1)), PageState::Unmapped);
    EXPECT_EQ(table.free_blocks(TensorKind::GateUp), 4u);
    EXPECT_EQ(code_of([&] { table.unmap_page(gu(1, 1)); }), ErrorCode::NotMapped);
    EXPECT_EQ(code_of([&] { table.read(gu(2, 2)); }), ErrorCode::PageFault);
    EXPECT_TRUE(table.consistent());
}

TEST(PageTable, PoolCapacity) {
    const ModelSpec spec{3, 2, 4, 8};
    PageTable table(spec);
    EXPECT_EQ(table.pool_blocks(TensorKind::GateUp), 4u);
    EXPECT_EQ(table.arena_bytes(), 2 * 2 * spec.expert_bytes());
    for (uint32_t i = 1; i <= 2; ++i) {
        for (uint32_t j = 1; j <= 2; ++j) table.map_page(gu(i, j));
    }
    EXPECT_EQ(table.free_blocks(TensorKind::GateUp), 0u);
    EXPECT_EQ(table.free_blocks(TensorKind::Down), 4u);
    EXPECT_EQ(code_of([&] { table.map_page(gu(3, 1)); }), ErrorCode::PoolExhausted);
    EXPECT_NO_THROW(table.map_page(dn(3, 1)));
}

TEST(PageTable, LowestFreeBlockFirst) {
    PageTable table({2, 2, 4, 8});
    for (uint32_t j = 1; j <= 2; ++j) table.map_page(gu(1, j));
    table.map_page(gu(2, 1));
    table.mark_resident(gu(1, 1));
    table.unmap_page(gu(1, 1));
    EXPECT_EQ(table.map_page(gu(2, 2)).block_id, 1u);
    EXPECT_EQ(*table.page_of(TensorKind::GateUp, 1), gu(2, 2));
}

TEST(PageTable, ResolveThroughStableAddress) {
    const ModelSpec spec{2, 2, 4, 8};
    PageTable table(spec);
    const auto& space = table.address_space();
    const uint64_t v = space.page_vaddr(dn(2, 1));
    table.map_page(dn(2, 1));
    auto dst = table.load_target(dn(2, 1));
    for (size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<std::byte>(k);
    table.mark_resident(dn(2, 1));
    EXPECT_EQ(code_of([&] { table.load_target(dn(2, 1)); }), ErrorCode::IllegalTransition);
    const auto view = table.resolve(v + 3, 5);
    ASSERT_EQ(view.size(), 5u);
    EXPECT_EQ(view[0], std::byte{3});
    EXPECT_EQ(code_of([&] { table.resolve(v + 3, spec.down_bytes()); }), ErrorCode::PageFault);
    EXPECT_EQ(space.page_vaddr(dn(2, 1)), v);
}

TEST(PageTable, TraceLineFormat) {
    std::vector<std::string> lines;
    PageTable table({2, 2, 4, 8}, [&](std::string_view s) { lines.emplace_back(s); });
    table.map_page(dn(2, 1));
    table.mark_resident(dn(2, 1));
    table.unmap_page(dn(2, 1));
    ASSERT_EQ(lines.size(), 4u);
    EXPECT_EQ(lines[0], "event=map layer=2 expert=1 kind=2 block=1 t=1");
    EXPECT_EQ(lines[3].rfind("event=unmap layer=2 expert=1 kind=2 block=1", 0), 0u);
}

// Random valid operations checked against a shadow model rebuilt solely from
// the trace lines.
TEST(PageTable, ShadowModelProperty) {
    const ModelSpec spec{4, 3, 2, 2};
    struct Shadow {
        std::map<std::pair<int, int>, std::pair<int, int>> fwd;  // (layer*10+expert, kind) -> block
        std::map<std::pair<int, int>, int> rev;                  // (kind, block) -> page key
        std::map<std::pair<int, int>, std::string> state;
    } shadow;
    bool shadow_ok = true;
    auto sink = [&](std::string_view line) {
        std::istringstream in{std::string(line)};
        std::string ev, tok;
        in >> ev;
        std::map<std::string, int> kv;
        while (in >> tok) {
            const auto eq = tok.find('=');
            kv[tok.substr(0, eq)] = std::stoi(tok.substr(eq + 1));
        }
        const std::pair<int, int> page{kv["layer"] * 10 + kv["expert"], kv["kind"]};
        const std::pair<int, int> blk{kv["kind"], kv["block"]};
        if (ev == "event=map") {
            if (shadow.fwd.count(page) || shadow.rev.count(blk)) shadow_ok = false;
            shadow.fwd[page] = blk;
            shadow.rev[blk] = page.first;
        } else if (ev == "event=unmap") {
            if (!shadow.fwd.count(page) || shadow.fwd[page] != blk) shadow_ok = false;
            shadow.fwd.erase(page);
            shadow.rev.erase(blk);
        }
    };
    PageTable table(spec, sink);
    std::mt19937_64 rng(42);
    std::vector<ExpertTensorId> ids;
    for (uint64_t i = 0; i < spec.tensor_count(); ++i) ids.push_back(id_from_linear(i, spec));
    for (int op = 0; op < 10000; ++op) {
        const ExpertTensorId id = ids[rng() % ids.size()];
        switch (table.state(id)) {
            case PageState::Unmapped:
                if (table.free_blocks(id.kind) > 0) table.map_page(id);
                break;
            case PageState::Loading: table.mark_resident(id); break;
            case PageState::Resident:
                if (rng() % 2) {
                    table.begin_evict(id);
                } else {
                    table.unmap_page(id);
                }
                break;
            case PageState::Evicting: table.unmap_page(id); break;
        }
        ASSERT_TRUE(table.consistent());
        ASSERT_TRUE(shadow_ok);
        ASSERT_LE(table.arena_peak_bytes(), table.arena_bytes());
    }
    // The shadow's forward map matches the table exactly.
    for (const auto& id : ids) {
        const auto b = table.block_of(id);
        const std::pair<int, int> key{static_cast<int>(id.layer * 10 + id.expert), kind_index(id.kind) + 1};
        ASSERT_EQ(b.has_value(), shadow.fwd.count(key) == 1);
        if (b) {
            EXPECT_EQ(static_cast<int>(b->block_id), shadow.fwd[key].second);
            EXPECT_EQ(*table.page_of(id.kind, b->block_id), id);
        }
    }
    EXPECT_GT(table.pages_ever_mapped(), 2 * spec.tensor_count());
}
