# Test package for persona-fusion response selection
