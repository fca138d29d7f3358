import torch.nn as nn

print("hello from the candidate")


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        print("building")
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(3, 10)

    def forward(self, x):
        return self.head(self.pool(x).flatten(1))
