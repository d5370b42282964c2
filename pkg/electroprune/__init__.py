"""
electroprune: Electrostatic-Force Filter Pruning
================================================

This package trains convolutional networks with a penalty modelled on
the electrostatic force between filters, then prunes the filters with
the smallest L1 norms without needing to retrain.

Main Components
---------------

layers, network, optim
    A small numpy engine: layers, models, loss, SGD and learning-rate policies
electrostatics
    Filter charges, force fields and the penalty gradient
pruner
    Local L1-rank structured pruning, plans and speedup accounting
trainer
    Training configuration and loops, fine-tuning, cost measurement
checkpoint
    HDF5 checkpoint files
data
    MNIST, CIFAR-10 and synthetic datasets
main
    The command-line interface

Usage
-----

As a command-line tool::

    $ electroprune train --model mnist-cnn --reg electrostatic --alpha-e 1e-12
    $ electroprune sweep --checkpoint checkpoint.h5

See the documentation for more details on configuration and usage.
"""
