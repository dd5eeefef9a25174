#include <gtest/gtest.h>

#include <cmath>

#include "mudman/stats.hpp"

using namespace mudman;

// Reference p-values from scipy.stats.mannwhitneyu(alternative="greater").

TEST(MannWhitney, ExactSmallSamples) {
  const auto r = mann_whitney_greater({1.1, 2.5, 3.3, 4.7}, {0.5, 2.0, 2.9});
  EXPECT_TRUE(r.exact);
  EXPECT_DOUBLE_EQ(r.u, 9.0);
  EXPECT_NEAR(r.p_greater, 0.2, 1e-12);
  const auto s = mann_whitney_greater({3, 4, 5}, {1, 2});
  EXPECT_DOUBLE_EQ(s.u, 6.0);
  EXPECT_NEAR(s.p_greater, 0.1, 1e-12);
  EXPECT_NEAR(mann_whitney_greater({1, 2}, {3, 4, 5}).p_greater, 1.0, 1e-12);
}

TEST(MannWhitney, NormalApproximationWithTies) {
  std::vector<double> x, y;
  for (int k = 0; k < 3; ++k) {
    for (double v : {1, 2, 2, 3, 4, 4, 4, 5, 6, 7, 7, 8}) x.push_back(v);
    for (double v : {0, 1, 1, 2, 3, 3, 4, 5, 5, 6}) y.push_back(v);
  }
  const auto r = mann_whitney_greater(x, y);
  EXPECT_FALSE(r.exact);
  EXPECT_DOUBLE_EQ(r.u, 729.0);
  EXPECT_NEAR(r.p_greater, 0.007160008381168392, 1e-9);
}

TEST(MannWhitney, NormalApproximationLargeSamples) {
  const std::vector<double> x{
    1.588184753155463, 1.749445608699771, 0.3663358089382619, -0.4645436509716318,
    -0.7921732151041414, 0.3313345168317169, -0.7221031700108729, -1.1368294451025298,
    0.4993119764837538, 0.43337460465860483, 0.8464683003382316, -0.6139709437353127,
    0.3050052836265724, 0.2352582396273121, -1.2058290012607418, 0.8379971786610338,
    0.6207111009988482, 2.689112043240686, 0.5029691773099643, 0.15529769183507947,
    1.5327571750289237, 0.49879124819342546, 1.2090310261532091, -0.0655442662325168,
    0.5181718133605824, 1.324288678487018, 0.9962470224529616, 0.4284722486328564,
    -0.7823080245960445, 0.7452217723610486, 0.3768634817192523, 1.0204675968592536,
    0.5162329378000731, 1.3881854111355232, 0.24843973457607457, 0.5019640600794213,
    0.9667764386256494, -0.7868846121744795, -0.1016602600740189, -0.20002856895236848};
  const std::vector<double> y{
    1.980615719523246, -0.09286202565608458, 0.652220223807572, 0.619375062173719,
    -0.2808734301868926, -1.5508368271304471, 0.9648439706761432, -0.40719676966359186,
    0.7179566567448998, -1.3052648251099646, -0.43798300196982975, 1.2568213446053613,
    1.4310039880525183, -1.3024586211383573, -1.3328074790889433, -0.04426443760183194,
    0.7282413233187197, 0.16050467937932975, 0.30355470782698374, -0.988836424974613,
    0.5867917138138036, 1.1168523411368356, -0.43567252028398296, -1.433488063663466,
    -0.7588208236837489, 0.7616580058369826, -1.733697191836434, -0.09187678780560388,
    -0.9910082851454934, -0.13113444197771876, -0.2445215867480386, 0.015856783272316016,
    1.5012073963034007, 0.42071044360788035, 1.333712745365226, -0.14141271430345395,
    -0.47958660782696577, 0.378810582265989, -2.8357907866800374, -0.03988881469206719};
  const auto r = mann_whitney_greater(x, y);
  EXPECT_FALSE(r.exact);
  EXPECT_DOUBLE_EQ(r.u, 1007.0);
  EXPECT_NEAR(r.p_greater, 0.02345858457050756, 1e-9);
}

TEST(MannWhitney, IdenticalSamplesAreNotSignificant) {
  const auto r = mann_whitney_greater(std::vector<double>(30, 1.0), std::vector<double>(30, 1.0));
  EXPECT_GE(r.p_greater, 0.5);
  EXPECT_THROW(mann_whitney_greater({}, {1.0}), InvalidArgument);
}

TEST(Moments, MeanAndStandardError) {
  EXPECT_DOUBLE_EQ(mean_of({1, 2, 3, 4}), 2.5);
  EXPECT_NEAR(standard_error_of({1, 2, 3, 4}), std::sqrt(5.0 / 3.0 / 4.0), 1e-15);
  EXPECT_EQ(standard_error_of({7}), 0.0);
}
