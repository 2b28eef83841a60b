#include <stdio.h>
#include <string.h>

#include "flowforget.h"

#define CHECK(call)                                                   \
  do {                                                                \
    FfStatus s_ = (call);                                             \
    if (s_ != FF_STATUS_OK) {                                         \
      char msg_[256];                                                 \
      ff_last_error_message(msg_, sizeof msg_);                       \
      fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, msg_);        \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  FfConfig *cfg = NULL;
  FfWorld *world = NULL;
  FfStack *stack = NULL;
  size_t latent_dim = 0, obs_dim = 0, k = 0;

  CHECK(ff_config_new(&cfg));
  CHECK(ff_config_set(cfg, "epochs", "20"));
  if (ff_config_set(cfg, "steps", "0") != FF_STATUS_CONFIG) {
    fprintf(stderr, "steps=0 accepted\n");
    return 1;
  }
  CHECK(ff_world_new(cfg, &world));
  CHECK(ff_world_dims(world, &latent_dim, &obs_dim, &k));
  CHECK(ff_stack_new(world, cfg, 0, &stack));

  double w[64], frozen[64], adapted[64];
  if (latent_dim > 64 || obs_dim > 64) return 1;
  CHECK(ff_sample_identity(world, 0, 5, w, latent_dim));
  CHECK(ff_generate(world, NULL, w, latent_dim, frozen, obs_dim));
  CHECK(ff_generate(world, stack, w, latent_dim, adapted, obs_dim));
  if (memcmp(frozen, adapted, obs_dim * sizeof(double)) != 0) {
    fprintf(stderr, "fresh stack changed the output\n");
    return 1;
  }
  if (ff_generate(world, stack, w, latent_dim, adapted, 1) != FF_STATUS_BUFFER_TOO_SMALL) return 1;

  ff_stack_free(stack);
  ff_world_free(world);
  ff_config_free(cfg);
  printf("ok %s %zu %zu %zu\n", ff_version(), latent_dim, obs_dim, k);
  return 0;
}
