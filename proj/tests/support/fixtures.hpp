// Small trained models and data shared by the unit tests. Each is built once
// per test binary.
#pragma once

#include "dcvit/dcvit.hpp"

namespace fixture {

inline dcvit::ViTConfig small_vit() {
  dcvit::ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.channels = 3;
  c.embed_dim = 32;
  c.heads = 2;
  c.depth = 3;
  c.mlp_hidden = 64;
  c.num_classes = 10;
  return c;
}

struct SmallWorld {
  dcvit::Dataset train;
  dcvit::Dataset test;
  dcvit::ViTModel teacher;
  double teacher_train_top1 = 0.0;
  double teacher_test_top1 = 0.0;
};

inline const SmallWorld& small_world() {
  static const SmallWorld world = [] {
    SmallWorld w;
    w.train = dcvit::gen_toy_dataset(10, 30, 16, 1, 0);
    w.test = dcvit::gen_toy_dataset(10, 20, 16, 1, 1);
    dcvit::PretrainConfig pc;
    pc.epochs = 30;
    pc.batch_size = 32;
    pc.warmup_epochs = 1;
    w.teacher = dcvit::pretrain(small_vit(), w.train, w.test, pc, 1).best;
    w.teacher_train_top1 = dcvit::evaluate(w.teacher, w.train).top1;
    w.teacher_test_top1 = dcvit::evaluate(w.teacher, w.test).top1;
    return w;
  }();
  return world;
}

}  // namespace fixture
