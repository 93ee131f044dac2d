# Training the toy grid detector on one client and inspecting predictions.
#
# The detector scores each of the 4x4 image cells for object presence and
# regresses a box per positive cell. Training follows the reference recipe:
# Adam, constant learning rate 1e-4, batch size 16, horizontal-flip
# augmentation.

import numpy as np

from fedbox import ToyDetectorConfig, ToyTrainer, default_profiles, generate

config = ToyDetectorConfig()  # 32x32 images, 4x4 grid, backbone 64->32->32
dataset = generate(default_profiles()[1], seed=7)  # the large client
trainer = ToyTrainer(config, seed=0)

print(f"training on {len(dataset.train)} images...")
for epochs in (25, 25, 50):
    trainer.train_epochs(list(dataset.train), epochs)
    report = trainer.evaluate(list(dataset.test))
    print(
        f"after {sum(trainer.epochs_log):3d} epochs: "
        f"precision={report.precision:.2f} recall={report.recall:.2f} "
        f"f1={report.f1:.2f} (tp={report.tp} fp={report.fp} fn={report.fn})"
    )

sample = dataset.test[0]
predictions = trainer.predict(sample.image[0], confidence_threshold=0.5)
print("\nground truth:", np.round(sample.boxes, 1).tolist())
for p in predictions[:3]:
    print(f"prediction conf={p.confidence:.2f} box={np.round(p.box, 1).tolist()}")

# The backbone's normalization layer keeps running statistics; they are
# ordinary named tensors with role "statistic" and travel with the model.
params = trainer.get_params()
print("\nparameter schema:")
for entry in params:
    print(f"  {entry.name:32s} {entry.role:9s} {entry.array.shape}")
