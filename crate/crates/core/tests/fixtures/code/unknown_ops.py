def main():
    #instruction
    #Flambe the bananas.
    #Serve warm.
    def Flambe_the_bananas():
        h_1 = Flambe(bananas, tool = torch, flavour = rum)
    def Serve_warm():
        h_2 = Serve(h_1, how = warm)
