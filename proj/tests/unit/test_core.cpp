#include <doctest.h>

#include "helpers.hpp"
#include "semiseg/rng.hpp"
#include "semiseg/tensor.hpp"

using namespace semiseg;

TEST_CASE("tensor indexing is row-major") {
  Tensor<int> t({2, 3, 4});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<int>(i);
  CHECK(t(1, 2, 3) == 23);
  CHECK(t(0, 1, 0) == 4);
  Tensor<int> b({2, 2, 3, 4});
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<int>(i);
  CHECK(b(1, 0, 0, 0) == 24);
  CHECK(b(1, 1, 2, 3) == 47);
}

TEST_CASE("tensor rejects mismatched data and shapes") {
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), ArgumentError);
  Tensor<float> a({2, 2}), b({4});
  CHECK_THROWS_AS(a += b, ArgumentError);
}

TEST_CASE("stack and unstack round trip") {
  Rng rng(1);
  std::vector<ImageTensor> items{testutil::random_image(3, 4, 5, rng), testutil::random_image(3, 4, 5, rng)};
  const auto batch = stack<double>(std::span<const ImageTensor>(items));
  CHECK(batch.shape() == std::vector<int>{2, 3, 4, 5});
  CHECK(unstack_item(batch, 1).cast<float>() == items[1]);
  std::vector<ImageTensor> bad{testutil::random_image(3, 4, 5, rng), testutil::random_image(3, 4, 4, rng)};
  CHECK_THROWS_AS(stack<float>(std::span<const ImageTensor>(bad)), ArgumentError);
}

TEST_CASE("derived streams are reproducible and independent of sibling use") {
  const Rng root(42);
  Rng a1 = root.derive("augment"), a2 = root.derive("augment");
  Rng d = root.derive("dropout");
  (void)d.uniform();
  CHECK(a1.uniform() == a2.uniform());
  CHECK(root.derive("augment").uniform() != root.derive("dropout").uniform());
  CHECK(root.derive(0).uniform() != root.derive(1).uniform());
}

TEST_CASE("uniform_int is inclusive") {
  Rng rng(3);
  bool lo = false, hi = false;
  for (int i = 0; i < 1000; ++i) {
    const int v = rng.uniform_int(2, 4);
    CHECK(v >= 2);
    CHECK(v <= 4);
    lo |= v == 2;
    hi |= v == 4;
  }
  CHECK(lo);
  CHECK(hi);
}
