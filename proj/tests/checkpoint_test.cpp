#include <gtest/gtest.h>

#include "dbfusion/checkpoint.hpp"
#include "dbfusion/hash.hpp"
#include "dbfusion/tensor_io.hpp"
#include "test_support.hpp"
#include "training_support.hpp"

namespace dbf {
namespace {

using testing::TempDir;
using testing::tiny_model_config;

TEST(Checkpoint, RoundTripAtStoragePrecision) {
  TempDir d("ckpt");
  MultimodalModel model(tiny_model_config());
  save_checkpoint(d / "m.dbft", model, "init");
  const Checkpoint ck = read_checkpoint(d / "m.dbft");
  EXPECT_EQ(ck.stage(), "init");
  ASSERT_EQ(ck.tensors.size(), model.params().all().size());
  for (const auto& p : model.params().all()) {
    const Tensor& t = ck.tensor(p.name);
    ASSERT_EQ(t.shape(), p.tensor.shape());
    for (std::size_t i = 0; i < t.numel(); ++i)
      ASSERT_EQ(t[i], static_cast<double>(static_cast<float>(p.tensor[i]))) << p.name;
  }
  const auto loaded = load_model(d / "m.dbft");
  EXPECT_EQ(to_json(loaded->config()), to_json(model.config()));
  for (const auto& g : {"vision", "projector", "lm"}) {
    EXPECT_EQ(group_hash(loaded->params(), g), group_hash(model.params(), g));
    EXPECT_EQ(group_hash(ck, g), group_hash(model.params(), g));
  }
}

TEST(Checkpoint, SaveIsByteStable) {
  TempDir d("ckpt-stable");
  MultimodalModel a(tiny_model_config()), b(tiny_model_config());
  save_checkpoint(d / "a.dbft", a, "init");
  save_checkpoint(d / "b.dbft", b, "init");
  EXPECT_EQ(read_file_bytes(d / "a.dbft"), read_file_bytes(d / "b.dbft"));
}

TEST(Checkpoint, GroupHashSeesEveryChange) {
  MultimodalModel model(tiny_model_config());
  const std::string h = group_hash(model.params(), "projector");
  model.params().get("projector.channel.up.bias").tensor.mutable_data()[0] += 1.0;
  EXPECT_NE(group_hash(model.params(), "projector"), h);
}

TEST(Checkpoint, ShapeMismatchIsConfigError) {
  TempDir d("ckpt-mismatch");
  MultimodalModel model(tiny_model_config());
  save_checkpoint(d / "m.dbft", model, "stage1");
  auto other_cfg = tiny_model_config();
  other_cfg.lm.d_model = 64;
  MultimodalModel other(other_cfg);
  EXPECT_THROW(apply_checkpoint(other, read_checkpoint(d / "m.dbft")), ConfigError);
  auto fewer = tiny_model_config();
  fewer.lm.layers = 2;
  MultimodalModel deeper(fewer);
  EXPECT_THROW(apply_checkpoint(deeper, read_checkpoint(d / "m.dbft")), ConfigError);
}

TEST(Checkpoint, CorruptFilesAreIoErrors) {
  TempDir d("ckpt-corrupt");
  MultimodalModel model(tiny_model_config());
  save_checkpoint(d / "m.dbft", model, "stage1");
  const std::string bytes = read_file_bytes(d / "m.dbft");
  write_file_bytes(d / "bad.dbft", "XXXXXXXX" + bytes.substr(8));
  EXPECT_THROW(read_checkpoint(d / "bad.dbft"), IoError);
  write_file_bytes(d / "short.dbft", bytes.substr(0, bytes.size() - 100));
  EXPECT_THROW(read_checkpoint(d / "short.dbft"), IoError);
  EXPECT_THROW(read_checkpoint(d / "missing.dbft"), IoError);
}

}  // namespace
}  // namespace dbf
