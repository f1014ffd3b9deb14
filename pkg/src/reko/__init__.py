"""Region-aware knowledge distillation (ReKo) for image-to-image translation."""
