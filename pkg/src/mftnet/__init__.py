"""Motor-imagery EEG decoder: multi-scale temporal convolutions fused with a
transformer encoder, trained end to end on a from-scratch autodiff engine."""

__version__ = "0.1.0"
