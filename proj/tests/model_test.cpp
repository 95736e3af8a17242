#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "eib/model/accounting.hpp"
#include "eib/model/checkpoint.hpp"
#include "eib/model/transformer.hpp"
#include "eib/numerics/gradcheck.hpp"
#include "eib/numerics/precision.hpp"
#include "support.hpp"

using namespace eib;

namespace {

ModelSpec desk_student() {
    ModelSpec s;
    s.vocab_size = 2000;
    s.max_seq_len = 32;
    s.embed_dim = 64;
    s.hidden_dim = 64;
    s.intermediate_dim = 256;
    s.num_layers = 2;
    s.num_heads = 4;
    s.share_layers = true;
    s.num_classes = 4;
    return s;
}

Real max_abs_diff(const Tensor& a, const Tensor& b) {
    Real m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("build_model parameter count matches a hand count") {
    // token 2000*64, positions 32*64, embedding norm 2*64,
    // one shared block: 4 attention linears (64*64+64, key without bias), 2 norms (2*64 each),
    // ffn 64*256+256 and 256*64+64, pooler 64*64+64, classifier 64*4+4.
    const std::size_t hand = 2000 * 64 + 32 * 64 + 128 + (4 * (64 * 64 + 64) - 64 + 2 * 128 + (64 * 256 + 256) +
                                                          (256 * 64 + 64)) +
                             (64 * 64 + 64) + (64 * 4 + 4);
    CHECK(hand == 184516);
    const TransformerModel m = build_model(desk_student());
    CHECK(m.parameter_count() == hand);
    CHECK(expected_parameter_count(desk_student()) == hand);

    ModelSpec f = desk_student();
    f.factorized_embedding = true;
    f.embed_dim = 16;
    f.share_layers = false;
    CHECK(build_model(f).parameter_count() == expected_parameter_count(f));
}

TEST_CASE("shared layers make block parameters independent of depth") {
    ModelSpec a = desk_student();
    ModelSpec b = desk_student();
    b.num_layers = 4;
    CHECK(build_model(a).parameter_count() == build_model(b).parameter_count());
    a.share_layers = b.share_layers = false;
    CHECK(build_model(a).parameter_count() < build_model(b).parameter_count());
}

TEST_CASE("build_model is deterministic per seed") {
    const TransformerModel a = build_model(desk_student());
    const TransformerModel b = build_model(desk_student());
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
    ModelSpec other = desk_student();
    other.seed = 1;
    CHECK(build_model(other).token_embedding.value != a.token_embedding.value);
}

TEST_CASE("spec validation") {
    ModelSpec s = desk_student();
    s.num_heads = 5;
    CHECK_THROWS_AS(build_model(s), Error);
    s = desk_student();
    s.factorized_embedding = true;
    s.embed_dim = 128;
    CHECK_THROWS_AS(build_model(s), Error);
}

TEST_CASE("single-token attention is exactly one") {
    ModelSpec s = testing::tiny_spec();
    s.num_heads = 1;
    const TransformerModel m = build_model(s);
    Batch b{1, 1, {2}, {1}, {0}};
    const ForwardTrace t = forward(m, b, {.attention = true});
    REQUIRE(t.attention.size() == s.num_layers);
    CHECK(t.attention[0].size() == 1);
    CHECK(t.attention[0][0] == 1.0);
}

TEST_CASE("attention rows over unmasked keys sum to one; masked keys get nothing") {
    const TransformerModel m = build_model(testing::tiny_spec());
    const Batch b = testing::random_batch(5, 8, 40, 3, 1);
    const ForwardTrace t = forward(m, b, {.attention = true});
    for (const Tensor& a : t.attention) {
        const std::size_t H = a.shape()[1], S = a.shape()[2];
        for (std::size_t bi = 0; bi < b.batch; ++bi)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t i = 0; i < S; ++i) {
                    Real sum = 0;
                    for (std::size_t j = 0; j < S; ++j) {
                        const Real p = a[((bi * H + h) * S + i) * S + j];
                        if (b.mask[bi * S + j]) sum += p;
                        else CHECK(p < 1e-6);
                    }
                    CHECK(std::abs(sum - 1) < 1e-5);
                }
    }
}

TEST_CASE("forward rejects out-of-vocabulary ids") {
    const TransformerModel m = build_model(testing::tiny_spec());
    Batch b{1, 2, {2, 40}, {1, 1}, {0}};
    try {
        forward(m, b);
        FAIL("expected vocab error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Vocab);
    }
}

TEST_CASE("permuting padded positions never changes logits") {
    const TransformerModel m = build_model(testing::tiny_spec());
    Batch b{1, 8, {2, 5, 6, 7, 9, 11, 13, 17}, {1, 1, 1, 1, 0, 0, 0, 0}, {0}};
    const Tensor base = forward(m, b).logits;
    Batch p = b;
    std::swap(p.ids[4], p.ids[7]);
    std::swap(p.ids[5], p.ids[6]);
    CHECK(max_abs_diff(base, forward(m, p).logits) < 1e-5);
}

TEST_CASE("shared block aliasing: mutating it changes every layer") {
    TransformerModel m = build_model(testing::tiny_spec(32, 3, true));
    REQUIRE(m.blocks.size() == 1);
    const Batch b = testing::random_batch(2, 6, 40, 3, 2);
    Tape t1;
    ForwardOptions o;
    o.capture_layer_outputs = true;
    const auto before = forward_on_tape(m, t1, b, o);
    std::vector<Tensor> prev;
    for (Var v : before.layer_outputs) prev.push_back(v.value());
    m.blocks[0].ffn_in.bias->value.fill(0.5);
    Tape t2;
    const auto after = forward_on_tape(m, t2, b, o);
    for (std::size_t l = 0; l < prev.size(); ++l) CHECK(max_abs_diff(prev[l], after.layer_outputs[l].value()) > 1e-3);
}

TEST_CASE("forward golden logits") {
    PrecisionScope f64(Precision::F64);
    const TransformerModel m = build_model(testing::tiny_spec());
    const Batch b = testing::random_batch(2, 6, 40, 3, 42);
    const Tensor z = forward(m, b).logits;
    // Recorded from the first verified build (64-bit mode, seed 7).
    const std::vector<double> golden{0.0060433800804719105,  -0.0032677831456218837, -0.014170965330261661,
                                     0.0060376906544360714,  -0.0032062807934079502, -0.014238432293545485};
    REQUIRE(z.size() == golden.size());
    for (std::size_t i = 0; i < golden.size(); ++i) CHECK(std::abs(z[i] - golden[i]) < 1e-12);
}

TEST_CASE("task-loss gradients of a tiny model match central differences") {
    PrecisionScope f64(Precision::F64);
    TransformerModel m = build_model(testing::tiny_spec(32, 1));
    testing::scramble(m, 0.3, 2);
    const Batch b = testing::random_batch(3, 6, 40, 3, 2);
    auto loss = [&](Tape& t) { return ag::cross_entropy(forward_on_tape(m, t, b).logits, b.labels); };
    auto ps = m.parameters();
    const auto r = finite_diff_check(loss, ps, {4e-3, 0, 1, true});
    INFO(r.worst_param, "[", r.worst_index, "] analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("32-bit gradients agree with coarse central differences") {
    PrecisionScope f32(Precision::F32);
    TransformerModel m = build_model(testing::tiny_spec(32, 1));
    testing::scramble(m, 0.3, 9);
    for (Parameter* p : m.parameters()) round_to_precision(p->value);
    const Batch b = testing::random_batch(3, 6, 40, 3, 3);
    auto loss = [&](Tape& t) { return ag::cross_entropy(forward_on_tape(m, t, b).logits, b.labels); };
    // Float rounding of the loss (~1e-7) over 2 eps limits the comparison to
    // entries with sizeable gradients: the classifier bias.
    std::vector<Parameter*> ps{&*m.classifier.bias};
    const auto r = finite_diff_check(loss, ps, {5e-2, 0, 1, true});
    INFO(r.worst_param, "[", r.worst_index, "] analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("integrate_head copies the teacher head") {
    ModelSpec ts = testing::tiny_spec(32, 2, false, 1);
    ModelSpec ss = testing::tiny_spec(32, 2, true, 2);
    const TransformerModel teacher = build_model(ts);
    TransformerModel student = build_model(ss);
    integrate_head(teacher, student);
    CHECK_FALSE(student.projector.has_value());
    CHECK(student.classifier.weight.value == teacher.classifier.weight.value);
    CHECK(student.pooler.weight.value == teacher.pooler.weight.value);
    CHECK(student.pooler.weight.name == "head.pooler.weight");

    // Student logits equal the teacher head applied to the student's hidden states.
    const Batch b = testing::random_batch(3, 6, 40, 3, 5);
    Tape t;
    ForwardOptions o;
    const ForwardVars sv = forward_on_tape(student, t, b, o);
    Var via_teacher = head_on_tape(teacher, t, sv.sequence_output, b, o);
    CHECK(sv.logits.value() == via_teacher.value());

    ModelSpec wide = testing::tiny_spec(64, 2, false, 1);
    const TransformerModel big = build_model(wide);
    TransformerModel small = build_model(ss);
    integrate_head(big, small);
    REQUIRE(small.projector.has_value());
    CHECK(small.projector->weight.value.shape() == Shape{32, 64});
    CHECK(small.head_uses_projector);
    CHECK(forward(small, b).logits.shape() == Shape{3, 3});

    ModelSpec other = ss;
    other.num_classes = 5;
    TransformerModel mismatch = build_model(other);
    CHECK_THROWS_AS(integrate_head(teacher, mismatch), Error);
}

TEST_CASE("storage accounting") {
    const TransformerModel m = build_model(desk_student());
    const StorageBreakdown fp = storage_bytes(m, StoragePrecision::Fp32);
    CHECK(fp.total() == 4 * m.parameter_count());
    CHECK(fp.embeddings == 4 * (2000 * 64 + 32 * 64 + 128));

    const StorageBreakdown q = storage_bytes(m, StoragePrecision::Int8WithFp32Steps);
    std::uint64_t expect = 0;
    for (const Parameter* p : m.parameters()) expect += p->value.rank() == 2 ? p->value.size() + 4 : 4 * p->value.size();
    CHECK(q.total() == expect);

    CHECK(std::abs(compression_ratio(407.0, 1.91) - 213.09) <= 0.01);
    CHECK(compression_ratio(5.0, 5.0) == 1.0);
}

TEST_CASE("operation counts") {
    ModelSpec s = desk_student();
    const TransformerModel m = build_model(s);
    // Hand count per layer at seq 32: q,k,v,o 4*32*64*64, scores and context
    // 2*32*32*64, ffn 2*32*64*256; head 64*64 + 64*4.
    const std::uint64_t layer = 4ull * 32 * 64 * 64 + 2ull * 32 * 32 * 64 + 2ull * 32 * 64 * 256;
    const std::uint64_t macs = 2 * layer + 64 * 64 + 64 * 4;
    CHECK(count_ops(m, 32, false).ops == 2 * macs);
    CHECK(std::string(count_ops(m, 32, true).label()) == "IOPs");
    CHECK_THROWS_AS(count_ops(m, 33, false), Error);

    // A [1 x d] x [d x d] matmul is 2 d^2 operations.
    ModelSpec one = s;
    one.num_layers = 1;
    const std::uint64_t single = count_ops(one, 64, false, 1);
    const std::uint64_t d = 64;
    CHECK(single - 2 * (d * d + d * 4) == 2 * (4 * d * d + 2 * d + 2 * d * 256));

    s.share_layers = false;
    ModelSpec s2 = s;
    s2.num_layers = 4;
    const std::uint64_t head = 2 * (64 * 64 + 64 * 4);
    CHECK(count_ops(s2, 64, false, 16) - head == 2 * (count_ops(s, 64, false, 16) - head));
}

TEST_CASE("embedding share of the reference small encoder") {
    const EmbeddingShare e = embedding_share(albert_tiny_reference());
    CHECK(e.token_embedding == 21128ull * 128);
    CHECK(std::abs(e.share() * 100 - 44.7) <= 3.0);
}

TEST_CASE("checkpoint round trip is byte-exact") {
    for (Precision p : {Precision::F32, Precision::F64}) {
        PrecisionScope scope(p);
        TransformerModel m = build_model(testing::tiny_spec());
        integrate_head(build_model(testing::tiny_spec(64, 1)), m);
        const auto bytes = encode_checkpoint(model_to_checkpoint(m));
        const TransformerModel back = model_from_checkpoint(decode_checkpoint(bytes));
        const auto pa = m.parameters();
        const auto pb = back.parameters();
        REQUIRE(pa.size() == pb.size());
        for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
        CHECK(encode_checkpoint(model_to_checkpoint(back)) == bytes);
        CHECK(back.head_uses_projector);
    }
}

TEST_CASE("truncated or corrupt checkpoints are rejected") {
    const TransformerModel m = build_model(testing::tiny_spec());
    auto bytes = encode_checkpoint(model_to_checkpoint(m));
    for (std::size_t cut : {std::size_t{3}, std::size_t{15}, std::size_t{40}, bytes.size() - 1}) {
        std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        try {
            decode_checkpoint(t);
            FAIL("truncated checkpoint accepted");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Format);
            CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
        }
    }
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), Error);
    bad = bytes;
    bad[4] = 9;
    CHECK_THROWS_AS(decode_checkpoint(bad), Error);

    const auto dir = std::filesystem::temp_directory_path() / "eib_model_test";
    save_checkpoint(model_to_checkpoint(m), dir / "m.eibt");
    CHECK(std::filesystem::exists(dir / "m.eibt"));
    CHECK_FALSE(std::filesystem::exists(dir / "m.eibt.tmp"));
    CHECK(encode_checkpoint(load_checkpoint(dir / "m.eibt")) == bytes);
    std::filesystem::remove_all(dir);
}
