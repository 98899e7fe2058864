#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "latmask/checkpoint.hpp"
#include "latmask/errors.hpp"

using namespace latmask;
using namespace latmask::ckpt;

namespace {

std::vector<std::uint8_t> ascii(std::string_view s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("crc32 and sha256 match published check values") {
  CHECK(crc32(ascii("123456789")) == 0xCBF43926u);
  CHECK(sha256_hex(ascii("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex({}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("serialized layout is byte exact") {
  Checkpoint c;
  c.add("w", NDArray(Shape{2}, {1.0, -2.0}), DType::f32);
  c.add("s", NDArray::scalar(0.5), DType::f64);
  const auto bytes = serialize(c);

  std::vector<std::uint8_t> expect = {'L', 'M', 'K', '1', 2, 0, 0, 0};
  // "w": name, f32, rank 1, dim 2, 1.0f = 0x3f800000, -2.0f = 0xc0000000
  for (int b : {1, 0, int('w'), 0, 1, 2, 0, 0, 0}) expect.push_back(static_cast<std::uint8_t>(b));
  for (std::uint8_t b : {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0}) expect.push_back(b);
  // "s": f64, rank 0, 0.5 = 0x3fe0000000000000
  for (int b : {1, 0, int('s'), 1, 0}) expect.push_back(static_cast<std::uint8_t>(b));
  for (std::uint8_t b : {0, 0, 0, 0, 0, 0, 0xe0, 0x3f}) expect.push_back(b);
  const std::uint32_t crc = crc32(expect);
  for (int i = 0; i < 4; ++i) expect.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));

  CHECK(bytes == expect);
  CHECK(parse(bytes) == c);
}

TEST_CASE("round trip through a file and metadata") {
  Checkpoint c;
  c.add("enc.w", NDArray(Shape{3, 2, 4}, 0.125));
  c.add("big", NDArray(Shape{5}, {1e-300, 3.0, -0.0, 7.5, 1e300}), DType::f64);
  c.set_meta("arch", "fcn_mini");
  c.set_meta("vocab", "a,b,c");
  const auto path = std::filesystem::temp_directory_path() / "latmask_ckpt_test" / "c.lmk";
  save(path, c);
  const Checkpoint back = load(path);
  CHECK(back == c);
  CHECK(back.meta("arch") == "fcn_mini");
  CHECK(back.meta("vocab") == "a,b,c");
  CHECK_THROWS_AS(back.meta("missing"), FormatError);
  CHECK_THROWS_AS(back.get("missing"), FormatError);
  CHECK(sha256_file(path) == sha256_hex(serialize(c)));
  CHECK_THROWS_AS(c.add("big", NDArray()), ContractError);
}

TEST_CASE("f32 arrays round values to single precision") {
  Checkpoint c;
  c.add("x", NDArray::from({0.1}));
  CHECK(parse(serialize(c)).get("x")[0] == static_cast<double>(0.1f));
}

TEST_CASE("corruption is detected") {
  Checkpoint c;
  c.add("x", NDArray(Shape{4}, 2.0));
  auto bytes = serialize(c);

  auto flipped = bytes;
  flipped[14] ^= 0x01;
  CHECK_THROWS_AS(parse(flipped), FormatError);

  auto short_bytes = bytes;
  short_bytes.resize(bytes.size() - 6);
  CHECK_THROWS_AS(parse(short_bytes), FormatError);

  auto magic = bytes;
  magic[3] = '2';
  CHECK_THROWS_AS(parse(magic), FormatError);

  // Valid CRC over an inconsistent body: count claims one more array.
  auto lying = bytes;
  lying.resize(lying.size() - 4);
  lying[4] = 2;
  const std::uint32_t crc = crc32(lying);
  for (int i = 0; i < 4; ++i) lying.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  CHECK_THROWS_AS(parse(lying), FormatError);
}
