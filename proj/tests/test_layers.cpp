#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "csrnet/layers.hpp"

using namespace csrnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "csrnet_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Init, ZerosOnesAndKaimingStatistics) {
  auto rng = make_rng(0);
  const auto zeros = nn::init_tensor<double>(Shape4{4, 3, 3, 3}, nn::InitScheme::zeros, rng);
  const auto ones = nn::init_tensor<double>(Shape4{1, 5, 1, 1}, nn::InitScheme::ones, rng);
  for (double v : zeros.values()) EXPECT_EQ(v, 0.0);
  for (double v : ones.values()) EXPECT_EQ(v, 1.0);

  double sum = 0, sq = 0;
  std::size_t count = 0;
  for (int rep = 0; rep < 6; ++rep) {
    const auto t = nn::init_tensor<double>(Shape4{64, 3, 3, 3}, nn::InitScheme::kaiming_fan_out, rng);
    for (double v : t.values()) {
      sum += v;
      sq += v * v;
      ++count;
    }
  }
  ASSERT_GE(count, 10000u);
  const double mean = sum / double(count);
  const double sd = std::sqrt(sq / double(count) - mean * mean);
  const double expected = std::sqrt(2.0 / (64.0 * 9.0));
  EXPECT_NEAR(sd, expected, 0.1 * expected);
}

TEST(Init, SameSeedIsBitwiseIdenticalAndOrderIndependent) {
  nn::ConvBNReLU<float> a(3, 8, 3), b(3, 8, 3);
  auto pa = a.params(), pb = b.params();
  nn::init_params(pa, 42);
  nn::init_params(pb, 42);
  for (const auto& [k, p] : pa) EXPECT_EQ(p->value, pb.at(k)->value) << k;
  nn::init_params(pb, 43);
  EXPECT_FALSE(pa.at("conv.weight")->value == pb.at("conv.weight")->value);
  EXPECT_EQ(pa.at("bn.gamma")->value, Tensor4<float>(Shape4{1, 8, 1, 1}, 1.0f));
  EXPECT_EQ(pa.at("bn.beta")->value, Tensor4<float>(Shape4{1, 8, 1, 1}, 0.0f));
}

TEST(Registry, PathsTrainableFlagsAndOrder) {
  nn::FcBNReLU<double> fc(4, 6);
  const auto p = fc.params();
  std::vector<std::string> names;
  for (const auto& [k, _] : p) names.push_back(k);
  EXPECT_EQ(names, (std::vector<std::string>{"bn.beta", "bn.gamma", "bn.num_batches_tracked", "bn.running_mean",
                                             "bn.running_var", "fc.weight"}));
  EXPECT_TRUE(std::is_sorted(names.begin(), names.end()));
  EXPECT_FALSE(p.at("bn.running_mean")->trainable);
  EXPECT_FALSE(p.at("bn.running_var")->trainable);
  EXPECT_TRUE(p.at("bn.gamma")->trainable);
  for (const auto& [k, prm] : p) EXPECT_EQ(prm->grad.shape(), prm->value.shape()) << k;
  EXPECT_EQ(nn::count_trainable(p), 4u * 6 + 6 + 6);

  nn::ParamMap<double> dup;
  nn::Param<double> slot(Shape4{1, 1, 1, 1}, nn::InitScheme::zeros);
  nn::register_param(dup, "a", slot);
  EXPECT_THROW(nn::register_param(dup, "a", slot), ConfigError);
}

TEST(ConvBNReLU, StrideOnePreservesSpatialSize) {
  for (std::size_t k : {1, 3})
    for (std::size_t side = 1; side <= 5; ++side) {
      nn::ConvBNReLU<double> m(2, 3, k);
      auto p = m.params();
      nn::init_params(p, 1);
      auto rng = make_rng(side);
      const auto y = m.forward(random_normal<double>(Shape4{2, 2, side, side + 1}, rng), nn::Mode::train);
      EXPECT_EQ(y.shape(), (Shape4{2, 3, side, side + 1}));
    }
}

TEST(ConvBNReLU, ConvHasNoBias) {
  nn::ConvBNReLU<float> m(3, 4, 3);
  EXPECT_EQ(m.params().count("conv.bias"), 0u);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  nn::ConvBNReLU<float> a(3, 5, 3), b(3, 5, 3);
  auto pa = a.params(), pb = b.params();
  nn::init_params(pa, 7);
  auto rng = make_rng(1);
  pa.at("bn.running_mean")->value = random_normal<float>(Shape4{1, 5, 1, 1}, rng);
  const auto path = temp_file("roundtrip.ckpt");
  nn::save_checkpoint(path.string(), pa);
  nn::assign_params(pb, nn::load_checkpoint<float>(path.string()));
  for (const auto& [k, p] : pa) EXPECT_EQ(p->value, pb.at(k)->value) << k;
}

TEST(Checkpoint, EmptyRegistryIsValidZeroEntryFile) {
  const auto path = temp_file("empty.ckpt");
  nn::save_checkpoint(path.string(), nn::ParamMap<double>{});
  EXPECT_EQ(fs::file_size(path), 0u);
  EXPECT_TRUE(nn::load_checkpoint<double>(path.string()).empty());
}

TEST(Checkpoint, MismatchedArchitectureNamesSlot) {
  nn::ConvBNReLU<float> a(3, 5, 3);
  auto pa = a.params();
  const auto path = temp_file("mismatch.ckpt");
  nn::save_checkpoint(path.string(), pa);
  const auto entries = nn::load_checkpoint<float>(path.string());

  nn::ConvBNReLU<float> wider(3, 6, 3);
  auto pw = wider.params();
  EXPECT_NE(message_of([&] { nn::assign_params(pw, entries); }).find("'bn.beta'"), std::string::npos);

  nn::FcBNReLU<float> other(3, 5);
  auto po = other.params();
  EXPECT_NE(message_of([&] { nn::assign_params(po, entries); }).find("'conv.weight'"), std::string::npos);

  auto missing = entries;
  missing.erase("bn.gamma");
  auto pa2 = a.params();
  EXPECT_NE(message_of([&] { nn::assign_params(pa2, missing); }).find("'bn.gamma'"), std::string::npos);
}

TEST(Checkpoint, TruncatedAndCorruptFiles) {
  nn::Conv2d<double> conv(2, 2, 3, 1, true);
  auto p = conv.params();
  const auto path = temp_file("trunc.ckpt");
  nn::save_checkpoint(path.string(), p);
  const auto full = fs::file_size(path);
  fs::resize_file(path, full - 5);
  EXPECT_NE(message_of([&] { nn::load_checkpoint<double>(path.string()); }).find("truncated"), std::string::npos);

  nn::save_checkpoint(path.string(), p);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4 + 4);  // name length + "bias", then the tensor magic
    f.put('Z');
  }
  EXPECT_NE(message_of([&] { nn::load_checkpoint<double>(path.string()); }).find("magic"), std::string::npos);
}
