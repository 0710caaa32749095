#include <math.h>
#include <stdio.h>
#include "cardioseg.h"

#define CHECK(expr)                                                          \
  do {                                                                       \
    CsStatus st_ = (expr);                                                   \
    if (st_ != CS_STATUS_OK) {                                               \
      fprintf(stderr, "%s -> %d: %s\n", #expr, (int)st_, cs_last_error());   \
      return 1;                                                              \
    }                                                                        \
  } while (0)

int main(void) {
  size_t dims[3] = {64, 64, 64};
  double spacing[3] = {1.35, 1.35, 1.35};
  CsVolume *image = NULL;
  CsLabel *label = NULL;
  CsBox box;
  CHECK(cs_phantom_generate(dims, spacing, 11, &image, &label, &box));

  size_t count = 0;
  CHECK(cs_label_count(label, &count));
  double d = 0.0, mad = 1.0, se = 0.0, sp = 0.0;
  CHECK(cs_dice(label, label, &d));
  CHECK(cs_mean_surface_distance(label, label, &mad));
  CHECK(cs_sensitivity_specificity(label, label, box, &se, &sp));

  CsStatus bad = cs_label_read("/nonexistent/mask.mhd", &label);
  if (bad != CS_STATUS_IO || cs_last_error()[0] == '\0') {
    fprintf(stderr, "expected an io error, got %d\n", (int)bad);
    return 1;
  }

  printf("version=%s count=%zu dice=%.3f mad=%.3f sens=%.3f spec=%.3f box=%zu..%zu\n", cs_version(), count, d, mad,
         se, sp, box.lo[0], box.hi[0]);
  cs_volume_free(image);
  cs_label_free(label);
  return (count > 0 && d == 1.0 && mad == 0.0 && se == 1.0 && sp == 1.0) ? 0 : 1;
}
