#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "csrnet/gradcheck.hpp"
#include "csrnet/tensor.hpp"
#include "csrnet/tensor_io.hpp"

using namespace csrnet;

TEST(Tensor, ShapeAndIndexing) {
  Tensor4<double> t(2, 3, 4, 5);
  EXPECT_EQ(t.size(), 120u);
  t(1, 2, 3, 4) = 7.0;
  EXPECT_EQ(t[119], 7.0);
  t(0, 1, 0, 0) = 3.0;
  EXPECT_EQ(t[20], 3.0);
  EXPECT_EQ(t.plane(0, 1)[0], 3.0);
}

TEST(Tensor, RejectsZeroExtentsAndWrongValueCount) {
  EXPECT_THROW(Tensor4<float>(Shape4{1, 0, 2, 2}), GeometryError);
  EXPECT_THROW(Tensor4<float>(Shape4{1, 1, 2, 2}, std::vector<float>(3)), DimensionError);
}

TEST(Tensor, CheckFiniteNamesOp) {
  Tensor4<double> t(1, 1, 1, 3);
  EXPECT_NO_THROW(check_finite(t, "x"));
  t[1] = std::numeric_limits<double>::quiet_NaN();
  try {
    check_finite(t, "my_op");
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("my_op"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos);
  }
}

TEST(Tensor, SeededRandomIsDeterministic) {
  auto r1 = make_rng(5, "a");
  auto r2 = make_rng(5, "a");
  auto r3 = make_rng(5, "b");
  const auto a = random_normal<double>(Shape4{1, 1, 4, 4}, r1);
  const auto b = random_normal<double>(Shape4{1, 1, 4, 4}, r2);
  const auto c = random_normal<double>(Shape4{1, 1, 4, 4}, r3);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == c);
}

template <typename T>
static std::string serialize(const Tensor4<T>& t) {
  std::ostringstream os;
  io::write_tensor(os, t);
  return os.str();
}

TEST(TensorIo, RoundTripIsBitwise) {
  auto rng = make_rng(1);
  const auto d = random_normal<double>(Shape4{2, 3, 4, 5}, rng);
  const auto f = random_normal<float>(Shape4{1, 2, 3, 1}, rng);
  std::istringstream is(serialize(d) + serialize(f));
  io::BinaryReader in(is);
  EXPECT_EQ(io::read_tensor<double>(in), d);
  EXPECT_EQ(io::read_tensor<float>(in), f);
  EXPECT_TRUE(in.at_end());
}

TEST(TensorIo, HeaderLayout) {
  const auto bytes = serialize(Tensor4<float>(Shape4{1, 2, 3, 4}, 1.5f));
  ASSERT_EQ(bytes.size(), 4u + 2 + 1 + 16 + 24 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "CSRT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 0);  // f32
  EXPECT_EQ(bytes[7 + 4], 2);
  EXPECT_EQ(serialize(Tensor4<double>(Shape4{1, 1, 1, 1}))[6], 1);
}

TEST(TensorIo, ConvertsPrecision) {
  const Tensor4<float> f(Shape4{1, 1, 1, 2}, std::vector<float>{0.25f, -3.0f});
  std::istringstream is(serialize(f));
  io::BinaryReader in(is);
  const auto d = io::read_tensor<double>(in);
  EXPECT_EQ(d[0], 0.25);
  EXPECT_EQ(d[1], -3.0);
}

TEST(TensorIo, BadMagicVersionAndTruncation) {
  auto bytes = serialize(Tensor4<double>(Shape4{1, 1, 2, 2}));
  {
    auto bad = bytes;
    bad[0] = 'X';
    std::istringstream is(bad);
    io::BinaryReader in(is);
    EXPECT_THROW(io::read_tensor<double>(in), FormatError);
  }
  {
    auto bad = bytes;
    bad[4] = 9;
    std::istringstream is(bad);
    io::BinaryReader in(is);
    EXPECT_THROW(io::read_tensor<double>(in), FormatError);
  }
  {
    std::istringstream is(bytes.substr(0, bytes.size() - 3));
    io::BinaryReader in(is, "blob");
    try {
      io::read_tensor<double>(in);
      FAIL();
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find("offset 23"), std::string::npos) << msg;
      EXPECT_NE(msg.find("expected 32 bytes, got 29"), std::string::npos) << msg;
    }
  }
}

TEST(GradCheck, IdentityIsExactlyZero) {
  auto rng = make_rng(3);
  auto x = random_normal<double>(Shape4{2, 3, 4, 5}, rng);
  GradCheckTarget t{"identity", {&x}, {"x"}, [&] { return x; },
                    [](const Tensor4<double>& dy) { return std::vector<Tensor4<double>>{dy}; }};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    GradCheckOptions opt;
    opt.seed = seed;
    const auto r = grad_check(t, opt);
    EXPECT_EQ(r.max_rel_error, 0.0);
    EXPECT_EQ(r.checked, x.size());
  }
}

TEST(GradCheck, DetectsWrongGradientAndIsDeterministic) {
  auto rng = make_rng(4);
  auto x = random_normal<double>(Shape4{1, 1, 3, 3}, rng);
  GradCheckTarget t{"square", {&x}, {"x"},
                    [&] {
                      Tensor4<double> y(x.shape());
                      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * x[i];
                      return y;
                    },
                    [&](const Tensor4<double>& dy) {
                      Tensor4<double> g(x.shape());
                      for (std::size_t i = 0; i < x.size(); ++i) g[i] = 2.2 * x[i] * dy[i];  // off by 10%
                      return std::vector<Tensor4<double>>{g};
                    }};
  const auto a = grad_check(t);
  const auto b = grad_check(t);
  EXPECT_NEAR(a.max_rel_error, 0.1 / 1.1, 1e-6);
  EXPECT_EQ(a.max_rel_error, b.max_rel_error);
}

TEST(GradCheck, SubsamplesLargePoints) {
  Tensor4<double> x(Shape4{1, 1, 1, 20000}, 1.0);
  GradCheckTarget t{"big", {&x}, {"x"}, [&] { return x; },
                    [](const Tensor4<double>& dy) { return std::vector<Tensor4<double>>{dy}; }};
  const auto r = grad_check(t);
  EXPECT_EQ(r.checked, GradCheckOptions{}.subsample);
}

TEST(GradCheck, NonFiniteForwardIsReported) {
  Tensor4<double> x(Shape4{1, 1, 1, 1}, 0.0);
  GradCheckTarget t{"logzero", {&x}, {"x"},
                    [&] { return Tensor4<double>(Shape4{1, 1, 1, 1}, std::log(x[0])); },
                    [](const Tensor4<double>& dy) { return std::vector<Tensor4<double>>{dy}; }};
  try {
    grad_check(t);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("logzero"), std::string::npos);
  }
}
