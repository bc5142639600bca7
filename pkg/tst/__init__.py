# Unit tests for the flow-equation toolkit
