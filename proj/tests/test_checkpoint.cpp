// Copyright 2026 The dustlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dustlab/checkpoint.hpp"
#include "test_util.hpp"

namespace dustlab {
namespace {

namespace fs = std::filesystem;

ModelConfig tiny() { return preset("tiny").model; }

template <class T>
void perturb(Model<T>& model, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& p : model.params().all()) {
    Tensor<T> t = p.tensor;
    for (auto& v : t.mutable_data()) v = static_cast<T>(rng.uniform(-1, 1));
  }
}

template <class T>
std::vector<std::vector<T>> snapshot(const Model<T>& model) {
  std::vector<std::vector<T>> out;
  for (const auto& p : model.params().all()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / ("dustlab_ckpt_" + std::to_string(::getpid()) + "_" + name)).string();
}

std::vector<std::uint8_t> reseal(std::vector<std::uint8_t> bytes) {
  const std::size_t body = bytes.size() - 8;
  const auto crc = crc64(bytes.data(), body);
  for (int i = 0; i < 8; ++i) bytes[body + i] = static_cast<std::uint8_t>(crc >> (8 * i));
  return bytes;
}

TEST(Crc64, KnownCheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc64(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), 0x995DC9BBDF1939FAULL);
}

template <class T>
void round_trip_case() {
  Model<T> model(tiny());
  perturb(model, 3);
  const auto path = temp_path("rt" + std::to_string(sizeof(T)));
  save_checkpoint(path, model, static_cast<const AdamState<T>*>(nullptr), "psnr=12.5\nstep=7");
  const auto file = read_checkpoint(path);
  auto loaded = load_model<T>(file);
  EXPECT_EQ(loaded.config(), model.config());
  ASSERT_EQ(loaded.params().size(), model.params().size());
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    EXPECT_EQ(loaded.params().all()[i].name, model.params().all()[i].name);
    EXPECT_TRUE(testing::bitwise_equal(loaded.params().all()[i].tensor, model.params().all()[i].tensor));
  }
  EXPECT_EQ(checkpoint_meta(file, "psnr"), "12.5");
  EXPECT_EQ(checkpoint_meta(file, "missing"), std::nullopt);
  EXPECT_EQ(file.scalar_count(), model.count_params());
  fs::remove(path);
}

TEST(Checkpoint, RoundTripFloat) { round_trip_case<float>(); }
TEST(Checkpoint, RoundTripDouble) { round_trip_case<double>(); }

TEST(Checkpoint, ParamCountCrossCheck) {
  for (const char* name : {"tiny", "default", "table2"}) {
    Model<float> model(preset(name).model);
    const auto file = decode_checkpoint(encode_checkpoint(model), name);
    EXPECT_EQ(file.scalar_count(), model.count_params()) << name;
  }
}

TEST(Checkpoint, HeaderLayout) {
  Model<float> model(tiny());
  const auto bytes = encode_checkpoint(model);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "DDNCKPT1");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9] | bytes[10] | bytes[11], 0);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[12 + i]) << (8 * i);
  const std::string text = to_text(model.config());
  ASSERT_EQ(len, text.size());
  EXPECT_EQ(std::string(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(len)), text);
}

TEST(Checkpoint, OptimizerStateRoundTrip) {
  Model<double> model(tiny());
  AdamState<double> state;
  state.step = 42;
  Rng rng(5);
  for (const auto& p : model.params().all()) {
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    for (Index i = 0; i < p.tensor.numel(); ++i) {
      m.push_back(rng.normal());
      v.push_back(rng.uniform());
    }
  }
  const auto file = decode_checkpoint(encode_checkpoint(model, &state), "mem");
  EXPECT_EQ(file.step, 42u);
  EXPECT_EQ(optimizer_state<double>(file), state);
}

TEST(Checkpoint, CorruptionIsRejectedWithoutPartialLoad) {
  Model<float> source(tiny());
  perturb(source, 4);
  const auto bytes = encode_checkpoint(source);
  Model<float> target(tiny());
  const auto before = snapshot(target);

  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  try {
    decode_checkpoint(truncated, "half.ckpt");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(flipped, "flip"), CheckpointError);
  EXPECT_THROW(decode_checkpoint(std::vector<std::uint8_t>{'P', '6'}, "x"), CheckpointError);
  EXPECT_EQ(snapshot(target), before);

  const auto path = temp_path("trunc");
  {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(truncated.data()), static_cast<std::streamsize>(truncated.size()));
  }
  EXPECT_THROW(load_model<float>(path), CheckpointError);
  fs::remove(path);
  EXPECT_THROW(read_checkpoint(temp_path("absent")), IoError);
}

TEST(Checkpoint, VersionMismatch) {
  Model<float> model(tiny());
  auto bytes = encode_checkpoint(model);
  bytes[8] = 2;
  try {
    decode_checkpoint(reseal(bytes), "v2");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
}

TEST(Checkpoint, UnknownNameIsNamed) {
  Model<float> model(tiny());
  auto file = decode_checkpoint(encode_checkpoint(model), "mem");
  file.params[3].name = "not.a.param";
  Model<float> target(tiny());
  perturb(target, 9);
  const auto before = snapshot(target);
  try {
    apply_checkpoint(target, file);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("not.a.param"), std::string::npos);
  }
  EXPECT_EQ(snapshot(target), before);
}

TEST(Checkpoint, MismatchedWidthsNameFirstOffender) {
  ModelConfig wide = tiny();
  wide.channels = {8, 24};
  wide.num_heads = {2, 2};
  Model<float> source(tiny());
  Model<float> target(wide);
  const auto file = decode_checkpoint(encode_checkpoint(source), "mem");
  std::string expected;
  for (const auto& p : file.params) {
    if (target.params().contains(p.name) && target.params().get(p.name).shape() != p.shape) {
      expected = p.name;
      break;
    }
  }
  ASSERT_FALSE(expected.empty());
  const auto before = snapshot(target);
  try {
    apply_checkpoint(target, file);
    FAIL();
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("shape mismatch"), std::string::npos);
    EXPECT_NE(msg.find("'" + expected + "'"), std::string::npos) << msg;
  }
  EXPECT_EQ(snapshot(target), before);
}

TEST(Checkpoint, PrecisionMismatch) {
  Model<double> model(tiny());
  const auto file = decode_checkpoint(encode_checkpoint(model), "mem");
  Model<float> target(tiny());
  EXPECT_THROW(apply_checkpoint(target, file), CheckpointError);
}

}  // namespace
}  // namespace dustlab
