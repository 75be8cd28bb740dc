from .data import (BufferedIter, DatasetSplit, cifar10_load, decode_records, encode_records,
                   find_cifar10, one_hot, read_batch_file, synthetic_split,
                   write_cifar10_dir)
from .init import conv_fan_in, kaiming_bound, kaiming_uniform_
from .loss import SoftmaxCrossEntropy, softmax_cross_entropy, softmax_crossEntropy
from .optim import SGD, Adam, Optimizer, make_optimizer

__all__ = [
    "BufferedIter", "DatasetSplit", "cifar10_load", "decode_records", "encode_records",
    "find_cifar10", "one_hot", "read_batch_file", "synthetic_split", "write_cifar10_dir",
    "conv_fan_in", "kaiming_bound", "kaiming_uniform_",
    "SoftmaxCrossEntropy", "softmax_cross_entropy", "softmax_crossEntropy",
    "SGD", "Adam", "Optimizer", "make_optimizer",
]
