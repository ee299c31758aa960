"""
Core modules for medattn: tensors and autodiff, text pipeline, model,
training, metrics and experiments
"""
