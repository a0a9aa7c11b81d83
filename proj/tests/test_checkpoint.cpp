#include "doctest.h"
#include "support.hpp"

#include "flexi/checkpoint.hpp"
#include "flexi/surgery.hpp"

#include <filesystem>

using namespace flexi;

namespace {

Model mixed_model() {
    Model m = init_random(testing_util::tiny_config(4), 12);
    prune_and_replace(m, {{2, 1}}, {});
    ExtensionSpec spec;
    spec.start = 0;
    spec.end = 0;
    extend(m, spec);
    testing_util::scramble(m, 5, 0.2);
    return m;
}

CheckpointErrc code_of(const std::string& bytes) {
    try {
        deserialize_checkpoint(bytes);
    } catch (const CheckpointError& e) {
        return e.code();
    }
    FAIL("expected a CheckpointError");
    return CheckpointErrc::io;
}

}  // namespace

TEST_CASE("round trip preserves every parameter and the logits bit-exactly") {
    const Model m = mixed_model();
    const std::string bytes = serialize_checkpoint(m);
    const Model back = deserialize_checkpoint(bytes);
    CHECK(back.config == m.config);
    REQUIRE(back.blocks.size() == m.blocks.size());
    for (std::size_t i = 0; i < m.blocks.size(); ++i) CHECK(kind_of(back.blocks[i]) == kind_of(m.blocks[i]));

    const auto pa = list_params(m);
    const auto pb = list_params(back);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        CHECK(std::equal(pa[i].values.begin(), pa[i].values.end(), pb[i].values.begin()));
    }
    const auto toks = testing_util::random_tokens(10, 11, 3);
    CHECK(forward(m, toks).logits == forward(back, toks).logits);
    CHECK(serialize_checkpoint(back) == bytes);
}

TEST_CASE("file round trip") {
    const Model m = mixed_model();
    const auto path = std::filesystem::temp_directory_path() / "flexi_ckpt_test.ckpt";
    save_checkpoint(m, path);
    CHECK(serialize_checkpoint(load_checkpoint(path)) == serialize_checkpoint(m));
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}

TEST_CASE("corrupt checkpoints are rejected with a specific code") {
    const std::string good = serialize_checkpoint(mixed_model());

    std::string bad_magic = good;
    bad_magic[0] = 'X';
    CHECK(code_of(bad_magic) == CheckpointErrc::bad_header);

    CHECK(code_of(good.substr(0, good.size() - 8)) == CheckpointErrc::truncated);

    // Point the shared block (position 3 after extension) at a missing base.
    std::string dangling = good;
    const auto at = dangling.find("block 3 shared 2 ");
    REQUIRE(at != std::string::npos);
    dangling.replace(at, 17, "block 3 shared 9 ");
    CHECK(code_of(dangling) == CheckpointErrc::dangling_base);
}

TEST_CASE("token files round trip") {
    const auto toks = testing_util::random_tokens(100, 1000, 2);
    const auto path = std::filesystem::temp_directory_path() / "flexi_tokens_test.bin";
    save_tokens(toks, path);
    CHECK(load_tokens(path) == toks);
    CHECK(std::filesystem::file_size(path) == 400);
    std::filesystem::remove(path);
}
