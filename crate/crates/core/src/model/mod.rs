//! Network definitions, datasets, training and evaluation.

mod data;
mod network;
mod train;

pub use data::{
    encode_idx_images, encode_idx_labels, load_dataset, parse_cifar10, parse_idx_images,
    parse_idx_labels, shuffled_indices, synth_dataset, synth_dataset_with, Dataset, DatasetSource,
    Split, SynthSpec, CIFAR_RECORD_BYTES, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use network::{
    build_network, ActShape, ConvLayer, FcLayer, Layer, Network, TapeParams, KNOWN_ARCHS,
};
pub use train::{
    argmax_rows, evaluate_accuracy, evaluate_loss, train, train_with, EpochStats, ProximalPenalty,
    TrainConfig,
};
