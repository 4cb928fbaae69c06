#include <gtest/gtest.h>

#include <sstream>

#include "cuglm/checkpoint.hpp"
#include "cuglm/training.hpp"
#include "support.hpp"

namespace cuglm {
namespace {

struct Fixture {
  std::vector<TokenFile> files = testing::load_dir(testing::source_path("data/toy"));
  Vocabs vocabs = testing::vocabs_for(files, 60, 12);
  ModelConfig config = testing::tiny_model(vocabs, 32);
};

TEST(Checkpoint, RoundTripIsExact) {
  Fixture fx;
  ParameterSet<float> p(fx.config);
  p.initialize(9);
  const Checkpoint ck = make_checkpoint(p, fx.vocabs, {{"note", "x y"}});
  std::stringstream ss;
  write_checkpoint(ss, ck);
  const Checkpoint back = read_checkpoint(ss);
  EXPECT_EQ(back.model, fx.config);
  EXPECT_EQ(back.meta.at("note"), "x y");
  EXPECT_EQ(back.token_vocab_fingerprint, fx.vocabs.token.fingerprint());
  const auto q = parameters_from<float>(back);
  p.for_each([&](const Parameter<float>& a) {
    bool same = false;
    q.for_each([&](const Parameter<float>& b) {
      if (b.name == a.name) same = a.value == b.value;
    });
    EXPECT_TRUE(same) << a.name;
  });
  std::stringstream again;
  write_checkpoint(again, back);
  EXPECT_EQ(again.str(), ss.str());
}

TEST(Checkpoint, VocabMismatch) {
  Fixture fx;
  ParameterSet<float> p(fx.config);
  p.initialize(1);
  const Checkpoint ck = make_checkpoint(p, fx.vocabs);
  EXPECT_NO_THROW(check_vocabs(ck, fx.vocabs));
  Vocabs other = testing::vocabs_for(fx.files, 61, 12);
  EXPECT_THROW(check_vocabs(ck, other), VocabMismatch);
}

TEST(Checkpoint, MissingOrMisshapenTensor) {
  Fixture fx;
  ParameterSet<float> p(fx.config);
  p.initialize(1);
  Checkpoint ck = make_checkpoint(p, fx.vocabs);
  Checkpoint missing = ck;
  missing.tensors.pop_back();
  EXPECT_THROW(parameters_from<float>(missing), CheckpointError);
  Checkpoint misshapen = ck;
  misshapen.tensors.front().shape[0] += 1;
  misshapen.tensors.front().data.resize(misshapen.tensors.front().data.size() + fx.config.hidden);
  EXPECT_THROW(parameters_from<float>(misshapen), CheckpointError);
  Checkpoint other_model = ck;
  other_model.model.layers = 3;
  EXPECT_THROW(parameters_from<float>(other_model), CheckpointError);
}

TEST(Checkpoint, CorruptStreams) {
  std::istringstream junk("definitely not a checkpoint");
  EXPECT_THROW(read_checkpoint(junk), CheckpointError);
  Fixture fx;
  ParameterSet<float> p(fx.config);
  p.initialize(1);
  std::stringstream ss;
  write_checkpoint(ss, make_checkpoint(p, fx.vocabs));
  const std::string full = ss.str();
  std::istringstream cut(full.substr(0, full.size() / 2));
  EXPECT_THROW(read_checkpoint(cut), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), IoError);
}

TEST(Checkpoint, OptimizerStateRoundTrip) {
  Fixture fx;
  ParameterSet<float> p(fx.config);
  p.initialize(3);
  AdamW<float> opt(p);
  TrainConfig cfg;
  p.for_each([](Parameter<float>& q) { q.grad.setConstant(0.01f); });
  opt.step(p, 1e-3, cfg);
  Checkpoint ck = make_checkpoint(p, fx.vocabs);
  opt.save_into(ck, p);
  AdamW<float> restored(p);
  restored.load_from(ck, p);
  EXPECT_EQ(restored.steps_taken(), 1u);
  ck.meta.erase("optimizer.t");
  EXPECT_THROW(restored.load_from(ck, p), CheckpointError);
}

}  // namespace
}  // namespace cuglm
