import torch

# keep CPU math reproducible across test runs in one session
torch.manual_seed(0)
